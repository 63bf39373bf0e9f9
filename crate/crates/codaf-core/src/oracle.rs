//! Naive reference implementations used to cross-check the engine.
//!
//! Everything here is float64, loop-based, and written for obviousness
//! rather than speed. These functions share no kernels with the engine:
//! convolution is a direct quadruple loop, sampling interpolates corners
//! inline, SSIM recomputes every window from scratch, and AP rebuilds the
//! precision/recall table per threshold by rescanning.

use ndarray::{Array1, Array2, Array4};

use crate::eval::{Detection, GtBox};

/// Direct zero-padded stride-1 convolution.
pub fn naive_conv(
    x: &Array4<f64>,
    w: &Array4<f64>,
    bias: &Array1<f64>,
    padding: usize,
) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let (cout, cin, k, _) = w.dim();
    assert_eq!(c, cin, "naive_conv channel mismatch");
    assert_eq!(bias.len(), cout, "naive_conv bias length");
    let oh = h + 2 * padding + 1 - k;
    let ow = wd + 2 * padding + 1 - k;
    let mut y = Array4::<f64>::zeros((b, cout, oh, ow));
    for bb in 0..b {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy + ky) as isize - padding as isize;
                                let ix = (ox + kx) as isize - padding as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    acc += w[[co, ci, ky, kx]]
                                        * x[[bb, ci, iy as usize, ix as usize]];
                                }
                            }
                        }
                    }
                    y[[bb, co, oy, ox]] = acc;
                }
            }
        }
    }
    y
}

/// Bilinear read with zero outside the image, corners interpolated inline.
fn naive_bilinear(x: &Array4<f64>, b: usize, c: usize, y: f64, xx: f64) -> f64 {
    let (_, _, h, w) = x.dim();
    let y0 = y.floor();
    let x0 = xx.floor();
    let fy = y - y0;
    let fx = xx - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let iy = y0 as isize + dy;
            let ix = x0 as isize + dx;
            if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                acc += wy * wx * x[[b, c, iy as usize, ix as usize]];
            }
        }
    }
    acc
}

/// Direct evaluation of offset-driven modulated sampling: each kernel tap
/// reads the input at (cell + tap grid + shared base + per-tap residual)
/// and contributes weight * value * modulation.
#[allow(clippy::too_many_arguments)]
pub fn naive_deformable_sample(
    x: &Array4<f64>,
    w: &Array4<f64>,
    bias: &Array1<f64>,
    base: &Array4<f64>,
    residual: &Array4<f64>,
    modulation: &Array4<f64>,
) -> Array4<f64> {
    let (b, c, h, wd) = x.dim();
    let (cout, cin, k, _) = w.dim();
    assert_eq!(c, cin, "naive_deformable_sample channel mismatch");
    assert_eq!(k % 2, 1, "kernel must be odd");
    let r = (k as isize - 1) / 2;
    let mut y = Array4::<f64>::zeros((b, cout, h, wd));
    for bb in 0..b {
        for co in 0..cout {
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = bias[co];
                    for ky in 0..k {
                        for kx in 0..k {
                            let kk = ky * k + kx;
                            let sy = i as f64
                                + (ky as isize - r) as f64
                                + base[[bb, 0, i, j]]
                                + residual[[bb, 2 * kk, i, j]];
                            let sx = j as f64
                                + (kx as isize - r) as f64
                                + base[[bb, 1, i, j]]
                                + residual[[bb, 2 * kk + 1, i, j]];
                            let m = modulation[[bb, kk, i, j]];
                            for ci in 0..cin {
                                acc += w[[co, ci, ky, kx]]
                                    * naive_bilinear(x, bb, ci, sy, sx)
                                    * m;
                            }
                        }
                    }
                    y[[bb, co, i, j]] = acc;
                }
            }
        }
    }
    y
}

/// Structural dissimilarity loss: 1 - mean SSIM over all valid uniform
/// windows, per channel. The window shrinks to min(window, H, W). The
/// stabilisers use C1 = (0.01 L)^2, C2 = (0.03 L)^2 with L the larger of
/// the two inputs' value ranges, floored at 1e-3.
pub fn naive_ssim(x: &Array4<f64>, y: &Array4<f64>, window: usize) -> f64 {
    assert_eq!(x.dim(), y.dim(), "naive_ssim shape mismatch");
    let (b, c, h, w) = x.dim();
    let win = window.min(h).min(w).max(1);
    let range = |a: &Array4<f64>| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in a.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        hi - lo
    };
    let l = range(x).max(range(y)).max(1e-3);
    let c1 = (0.01 * l).powi(2);
    let c2 = (0.03 * l).powi(2);
    let n = (win * win) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for bb in 0..b {
        for cc in 0..c {
            for oy in 0..=(h - win) {
                for ox in 0..=(w - win) {
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) =
                        (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in 0..win {
                        for dx in 0..win {
                            let a = x[[bb, cc, oy + dy, ox + dx]];
                            let b2 = y[[bb, cc, oy + dy, ox + dx]];
                            sa += a;
                            sb += b2;
                            saa += a * a;
                            sbb += b2 * b2;
                            sab += a * b2;
                        }
                    }
                    let mu_a = sa / n;
                    let mu_b = sb / n;
                    let va = saa / n - mu_a * mu_a;
                    let vb = sbb / n - mu_b * mu_b;
                    let cov = sab / n - mu_a * mu_b;
                    let ssim = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                        / ((mu_a * mu_a + mu_b * mu_b + c1) * (va + vb + c2));
                    total += ssim;
                    count += 1;
                }
            }
        }
    }
    1.0 - total / count as f64
}

/// One-directional InfoNCE over row-aligned embedding pairs: the positive
/// for row i of `v` is row i of `i_emb`; every other row of `i_emb` is a
/// negative.
pub fn naive_info_nce(v: &Array2<f64>, i_emb: &Array2<f64>, tau: f64) -> f64 {
    assert_eq!(v.dim(), i_emb.dim(), "naive_info_nce shape mismatch");
    assert!(tau > 0.0, "temperature must be positive");
    let n = v.nrows();
    let mut total = 0.0;
    for a in 0..n {
        let mut sims = Vec::with_capacity(n);
        for b in 0..n {
            let mut dot = 0.0;
            for d in 0..v.ncols() {
                dot += v[[a, d]] * i_emb[[b, d]];
            }
            sims.push(dot / tau);
        }
        let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
        total += lse - sims[a];
    }
    total / n as f64
}

fn naive_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if ua <= 0.0 {
        0.0
    } else {
        inter / ua
    }
}

/// Mean average precision over classes present in the ground truth, at a
/// single IoU threshold. Quadratic rescanning implementation.
pub fn naive_ap(dets: &[Detection], gts: &[GtBox], thr: f64) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &cls in &classes {
        let gt_total = gts.iter().filter(|g| g.class_id == cls).count();
        let mut order: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == cls).collect();
        order.sort_by(|&a, &b| {
            dets[b].score
                .partial_cmp(&dets[a].score)
                .expect("finite scores")
                .then(dets[a].image_id.cmp(&dets[b].image_id))
                .then(a.cmp(&b))
        });
        let mut used: Vec<bool> = vec![false; gts.len()];
        let mut tps: Vec<bool> = Vec::with_capacity(order.len());
        for &di in &order {
            let d = &dets[di];
            let mut best_gi = usize::MAX;
            let mut best_iou = 0.0;
            for (gi, g) in gts.iter().enumerate() {
                if used[gi] || g.class_id != cls || g.image_id != d.image_id {
                    continue;
                }
                let v = naive_iou(&d.bbox, &g.bbox);
                if v >= thr && v > best_iou {
                    best_iou = v;
                    best_gi = gi;
                }
            }
            if best_gi != usize::MAX {
                used[best_gi] = true;
                tps.push(true);
            } else {
                tps.push(false);
            }
        }
        // Precision at every cut, then the all-points envelope integral,
        // rescanning the prefix for each cut.
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for cut in 0..tps.len() {
            if !tps[cut] {
                continue;
            }
            let tp_here = tps[..=cut].iter().filter(|&&t| t).count();
            let recall = tp_here as f64 / gt_total as f64;
            // Envelope: best precision at any cut with recall >= this one,
            // i.e. any later cut (recall is nondecreasing) or this one.
            let mut best_p = 0.0;
            for c2 in cut..tps.len() {
                let tp2 = tps[..=c2].iter().filter(|&&t| t).count();
                let p2 = tp2 as f64 / (c2 + 1) as f64;
                if p2 > best_p {
                    best_p = p2;
                }
            }
            ap += (recall - prev_recall) * best_p;
            prev_recall = recall;
        }
        sum += ap;
    }
    sum / classes.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conv_identity_kernel_reproduces_input() {
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let y = naive_conv(&x, &w, &Array1::zeros(1), 1);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_zero_kernel_yields_bias_everywhere() {
        let x = Array4::from_elem((1, 2, 3, 3), 4.0);
        let w = Array4::<f64>::zeros((2, 2, 3, 3));
        let y = naive_conv(&x, &w, &array![0.5, -1.5], 1);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(y[[0, 0, i, j]], 0.5);
                assert_eq!(y[[0, 1, i, j]], -1.5);
            }
        }
    }

    #[test]
    fn deformable_with_identity_bundle_equals_conv() {
        let x = Array4::from_shape_fn((1, 2, 5, 5), |(_, c, i, j)| {
            (c as f64 + 1.0) * (i as f64) - 0.3 * j as f64
        });
        let w = Array4::from_shape_fn((3, 2, 3, 3), |(o, c, a, b)| {
            0.1 * (o as f64 - 1.0) + 0.01 * (c + a + b) as f64
        });
        let bias = array![0.1, 0.2, 0.3];
        let base = Array4::zeros((1, 2, 5, 5));
        let residual = Array4::zeros((1, 18, 5, 5));
        let modulation = Array4::from_elem((1, 9, 5, 5), 1.0);
        let yd = naive_deformable_sample(&x, &w, &bias, &base, &residual, &modulation);
        let yc = naive_conv(&x, &w, &bias, 1);
        for (a, b) in yd.iter().zip(yc.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deformable_integer_base_translates_single_tap_read() {
        // Center-only unit kernel, base (0, 1): output is the input
        // shifted left by one pixel with zero fill on the right edge.
        let x = Array4::from_shape_fn((1, 1, 3, 4), |(_, _, i, j)| (10 * i + j) as f64);
        let mut w = Array4::<f64>::zeros((1, 1, 3, 3));
        w[[0, 0, 1, 1]] = 1.0;
        let mut base = Array4::zeros((1, 2, 3, 4));
        base.slice_mut(ndarray::s![0, 1, .., ..]).fill(1.0);
        let residual = Array4::zeros((1, 18, 3, 4));
        let modulation = Array4::from_elem((1, 9, 3, 4), 1.0);
        let y =
            naive_deformable_sample(&x, &w, &Array1::zeros(1), &base, &residual, &modulation);
        for i in 0..3 {
            for j in 0..4 {
                let want = if j + 1 < 4 { x[[0, 0, i, j + 1]] } else { 0.0 };
                assert_eq!(y[[0, 0, i, j]], want, "at ({i},{j})");
            }
        }
    }

    #[test]
    fn ssim_of_identical_inputs_is_zero_loss() {
        let x = Array4::from_shape_fn((1, 2, 8, 8), |(_, c, i, j)| {
            ((i * j + c) as f64 * 0.37).sin()
        });
        let loss = naive_ssim(&x, &x.clone(), 7);
        assert!(loss.abs() < 1e-12, "loss = {loss}");
    }

    #[test]
    fn info_nce_single_pair_is_zero() {
        let v = Array2::from_shape_vec((1, 4), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let i = v.clone();
        assert_eq!(naive_info_nce(&v, &i, 0.07), 0.0);
    }

    #[test]
    fn info_nce_two_pair_case_matches_closed_form() {
        // Positive similarity 1, negative -1, tau 1:
        // loss = ln(1 + e^-2) = 0.126928...
        let v = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let i = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        // sim matrix with these rows is [[1,0],[0,1]]; adjust to get -1
        // off-diagonal: use antipodal pairs.
        let v2 = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let i2 = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let loss = naive_info_nce(&v2, &i2, 1.0);
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-12, "{loss} vs {want}");
        assert!((want - 0.126928).abs() < 1e-6);
        // The orthogonal case for contrast: ln(1 + e^-1) each row.
        let loss_orth = naive_info_nce(&v, &i, 1.0);
        let want_orth = (1.0 + (-1.0f64).exp()).ln();
        assert!((loss_orth - want_orth).abs() < 1e-12);
    }

    #[test]
    fn ap_hand_example_is_five_sixths() {
        let gts = vec![
            GtBox { image_id: 0, class_id: 0, bbox: [0.0, 0.0, 10.0, 10.0] },
            GtBox { image_id: 0, class_id: 0, bbox: [20.0, 20.0, 30.0, 30.0] },
        ];
        let dets = vec![
            Detection { image_id: 0, class_id: 0, bbox: [0.0, 0.0, 10.0, 10.0], score: 0.9 },
            Detection { image_id: 0, class_id: 0, bbox: [40.0, 0.0, 50.0, 10.0], score: 0.8 },
            Detection { image_id: 0, class_id: 0, bbox: [20.0, 20.0, 30.0, 30.0], score: 0.7 },
        ];
        let ap = naive_ap(&dets, &gts, 0.5);
        assert!((ap - 5.0 / 6.0).abs() < 1e-9, "AP = {ap}, want 0.8333");
    }
}
