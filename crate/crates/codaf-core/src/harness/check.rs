//! The verification suite behind the `check` subcommand: randomized
//! equivalence against the instrumented references, the deformable
//! degeneracy sweep, a per-operation gradient audit in both precisions,
//! and a deliberate-fault probe that proves the audit can actually catch
//! a broken backward pass.

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::eval::{mean_ap, Detection, GtBox};
use crate::losses::{info_nce_value, ssim_loss_value};
use crate::oracle::{naive_ap, naive_conv, naive_deformable_sample, naive_info_nce, naive_ssim};
use crate::params::he_conv;
use crate::primitives::grad_check;
use crate::tape::{Tape, Var};
use crate::tensor::{rand_uniform, randn, Scalar};

/// Elementwise maps must agree with their references this tightly.
pub const MAP_TOL: f64 = 1e-5;
/// Scalar losses and average precision must agree this tightly.
pub const SCALAR_TOL: f64 = 1e-6;

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub name: String,
    pub trials: usize,
    /// Worst deviation (equivalence) or worst relative error (gradients).
    pub worst: f64,
    pub tol: f64,
    pub pass: bool,
}

impl CheckReport {
    fn new(name: impl Into<String>, trials: usize, worst: f64, tol: f64) -> Self {
        let pass = worst.is_finite() && worst <= tol;
        CheckReport { name: name.into(), trials, worst, tol, pass }
    }

    pub fn line(&self) -> String {
        format!(
            "{} {:<44} worst {:>10.3e}  tol {:>8.1e}  ({} trials)",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.worst,
            self.tol,
            self.trials
        )
    }
}

fn max_abs_diff(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- oracle equivalence -------------------------------------------------------

fn conv_equivalence(trials: usize, seed: u64) -> CheckReport {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(t as u64));
        let (b, cin, cout) = (
            rng.random_range(1..=2usize),
            rng.random_range(1..=3usize),
            rng.random_range(1..=3usize),
        );
        let k = [1usize, 3][rng.random_range(0..2usize)];
        let pad = rng.random_range(0..=1usize);
        let h = rng.random_range(k + 1..=7usize.max(k + 1));
        let w = rng.random_range(k + 1..=7usize.max(k + 1));
        let x: ArrayD<f64> = randn(&mut rng, &[b, cin, h, w]);
        let wt: ArrayD<f64> = randn(&mut rng, &[cout, cin, k, k]);
        let bias: ArrayD<f64> = randn(&mut rng, &[cout]);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(wt.clone(), false);
        let bv = tape.leaf(bias.clone(), false);
        let y = tape.conv2d(xv, wv, bv, pad, 1);
        let got = tape.value(y).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        let want = naive_conv(
            &x.into_dimensionality().unwrap(),
            &wt.into_dimensionality().unwrap(),
            &bias.into_dimensionality::<ndarray::Ix1>().unwrap(),
            pad,
        );
        worst = worst.max(max_abs_diff(&got, &want));
    }
    CheckReport::new("conv2d vs reference", trials, worst, MAP_TOL)
}

fn deformable_equivalence(trials: usize, seed: u64) -> CheckReport {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + t as u64));
        let (b, cin, cout) = (1usize, rng.random_range(1..=2usize), rng.random_range(1..=2usize));
        let (h, w) = (rng.random_range(4..=6usize), rng.random_range(4..=6usize));
        let x: ArrayD<f64> = randn(&mut rng, &[b, cin, h, w]);
        let wt: ArrayD<f64> = randn(&mut rng, &[cout, cin, 3, 3]);
        let bias: ArrayD<f64> = randn(&mut rng, &[cout]);
        // Offsets large enough to leave the grid sometimes, so the
        // out-of-bounds convention is exercised too.
        let base: ArrayD<f64> = rand_uniform(&mut rng, &[b, 2, h, w], -2.0, 2.0);
        let residual: ArrayD<f64> = rand_uniform(&mut rng, &[b, 18, h, w], -0.8, 0.8);
        let modulation: ArrayD<f64> = rand_uniform(&mut rng, &[b, 9, h, w], 0.0, 1.0);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(wt.clone(), false);
        let bv = tape.leaf(bias.clone(), false);
        let basev = tape.leaf(base.clone(), false);
        let resv = tape.leaf(residual.clone(), false);
        let modv = tape.leaf(modulation.clone(), false);
        let y = tape.deformable_sample(xv, wv, bv, basev, resv, modv);
        let got = tape.value(y).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        let want = naive_deformable_sample(
            &x.into_dimensionality().unwrap(),
            &wt.into_dimensionality().unwrap(),
            &bias.into_dimensionality::<ndarray::Ix1>().unwrap(),
            &base.into_dimensionality().unwrap(),
            &residual.into_dimensionality().unwrap(),
            &modulation.into_dimensionality().unwrap(),
        );
        worst = worst.max(max_abs_diff(&got, &want));
    }
    CheckReport::new("deformable sampling vs reference", trials, worst, MAP_TOL)
}

fn ssim_equivalence(trials: usize, seed: u64) -> CheckReport {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2000 + t as u64));
        let shape = [
            rng.random_range(1..=2usize),
            rng.random_range(1..=2usize),
            rng.random_range(5..=9usize),
            rng.random_range(5..=9usize),
        ];
        let win = rng.random_range(3..=8usize);
        let x: ArrayD<f64> = rand_uniform(&mut rng, &shape, 0.0, 1.0);
        let y: ArrayD<f64> = rand_uniform(&mut rng, &shape, 0.0, 1.0);
        let x4 = x.into_dimensionality::<ndarray::Ix4>().unwrap();
        let y4 = y.into_dimensionality::<ndarray::Ix4>().unwrap();
        let got = ssim_loss_value::<f64>(&x4, &y4, win).expect("valid shapes");
        let want = naive_ssim(&x4, &y4, win);
        worst = worst.max((got - want).abs());
    }
    CheckReport::new("ssim loss vs reference", trials, worst, SCALAR_TOL)
}

fn info_nce_equivalence(trials: usize, seed: u64) -> CheckReport {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(3000 + t as u64));
        let (n, d) = (rng.random_range(1..=6usize), rng.random_range(2..=8usize));
        let tau = rng.random_range(0.05..1.0);
        let mut v: Array2<f64> =
            randn::<f64, _>(&mut rng, &[n, d]).into_dimensionality().unwrap();
        let mut i: Array2<f64> =
            randn::<f64, _>(&mut rng, &[n, d]).into_dimensionality().unwrap();
        for mut row in v.rows_mut().into_iter().chain(i.rows_mut()) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|x| x / norm);
        }
        let got = info_nce_value(&v, &i, tau).expect("valid embeddings");
        let want = naive_info_nce(&v, &i, tau);
        worst = worst.max((got - want).abs());
    }
    CheckReport::new("contrastive loss vs reference", trials, worst, SCALAR_TOL)
}

fn ap_equivalence(trials: usize, seed: u64) -> CheckReport {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(4000 + t as u64));
        let classes = rng.random_range(1..=3usize);
        let images = rng.random_range(1..=4usize);
        let mut gts = Vec::new();
        let mut dets = Vec::new();
        for image_id in 0..images {
            for _ in 0..rng.random_range(1..=4usize) {
                let x0 = rng.random_range(0.0..80.0);
                let y0 = rng.random_range(0.0..80.0);
                let w = rng.random_range(8.0..30.0);
                let h = rng.random_range(8.0..30.0);
                let class_id = rng.random_range(0..classes);
                let bbox = [x0, y0, x0 + w, y0 + h];
                gts.push(GtBox { image_id, class_id, bbox });
                // Most objects get a jittered detection, some are missed.
                if rng.random_range(0.0..1.0) < 0.8 {
                    let mut j = || rng.random_range(-6.0..6.0);
                    let bbox = [x0 + j(), y0 + j(), x0 + w + j(), y0 + h + j()];
                    dets.push(Detection {
                        image_id,
                        class_id,
                        bbox,
                        score: rng.random_range(0.1..1.0),
                    });
                }
            }
            for _ in 0..rng.random_range(0..=3usize) {
                let x0 = rng.random_range(0.0..90.0);
                let y0 = rng.random_range(0.0..90.0);
                dets.push(Detection {
                    image_id,
                    class_id: rng.random_range(0..classes),
                    bbox: [x0, y0, x0 + rng.random_range(5.0..25.0), y0 + rng.random_range(5.0..25.0)],
                    score: rng.random_range(0.1..1.0),
                });
            }
        }
        for thr in [0.5, 0.75] {
            let got = mean_ap(&dets, &gts, thr).expect("valid boxes");
            let want = naive_ap(&dets, &gts, thr);
            worst = worst.max((got - want).abs());
        }
    }
    CheckReport::new("average precision vs reference", trials, worst, SCALAR_TOL)
}

/// Randomized value equivalence of every instrumented operation against
/// its plain reference implementation.
pub fn oracle_suite(trials: usize, seed: u64) -> Vec<CheckReport> {
    vec![
        conv_equivalence(trials, seed),
        deformable_equivalence(trials, seed),
        ssim_equivalence(trials, seed),
        info_nce_equivalence(trials, seed),
        ap_equivalence(trials, seed),
    ]
}

/// Deformable sampling with zero offsets, zero refinements and unit
/// modulation must reproduce the plain convolution.
pub fn degeneracy_suite(cases: usize, seed: u64) -> CheckReport {
    let mut worst = 0.0f64;
    for t in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(5000 + t as u64));
        let (b, cin, cout) = (
            rng.random_range(1..=2usize),
            rng.random_range(1..=3usize),
            rng.random_range(1..=3usize),
        );
        let (h, w) = (rng.random_range(3..=7usize), rng.random_range(3..=7usize));
        let x: ArrayD<f64> = randn(&mut rng, &[b, cin, h, w]);
        let wt: ArrayD<f64> = randn(&mut rng, &[cout, cin, 3, 3]);
        let bias: ArrayD<f64> = randn(&mut rng, &[cout]);
        let mut tape: Tape<f64> = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(wt.clone(), false);
        let bv = tape.leaf(bias.clone(), false);
        let basev = tape.leaf(ArrayD::zeros(IxDyn(&[b, 2, h, w])), false);
        let resv = tape.leaf(ArrayD::zeros(IxDyn(&[b, 18, h, w])), false);
        let modv = tape.leaf(ArrayD::from_elem(IxDyn(&[b, 9, h, w]), 1.0), false);
        let deform = tape.deformable_sample(xv, wv, bv, basev, resv, modv);
        let plain = tape.conv2d(xv, wv, bv, 1, 1);
        let got = tape.value(deform).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        let want = tape.value(plain).clone().into_dimensionality::<ndarray::Ix4>().unwrap();
        worst = worst.max(max_abs_diff(&got, &want));
    }
    CheckReport::new("deformable degeneracy equals conv", cases, worst, MAP_TOL)
}

// ---- gradient audit -----------------------------------------------------------

/// Operations covered by the gradient audit.
pub const GRAD_OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "mul_bcast",
    "scale",
    "add_scalar",
    "neg",
    "abs",
    "ln",
    "sigmoid",
    "relu",
    "softplus",
    "min_elem",
    "mean_all",
    "sum_all",
    "mean_of",
    "reshape",
    "concat_c",
    "slice_c",
    "channel_mean",
    "channel_max",
    "global_avg_pool",
    "global_max_pool",
    "upsample_nearest2",
    "diff_w",
    "diff_h",
    "gather_cells",
    "matmul_nt",
    "logsumexp_rows",
    "diag",
    "l2_normalize_rows",
    "softmax_c",
    "box_filter_valid",
    "bce_with_logits_mean",
    "conv2d",
    "bilinear_sample",
    "deformable_sample",
    "contrastive_loss",
    "mae_loss",
    "ssim_loss",
    "sparsity_loss",
    "smoothness_loss",
];

/// Values with magnitude in [lo, hi] and random sign, for operations
/// with a kink or a pole at the origin.
fn signed_away_from_zero<F: Scalar, R: Rng>(
    rng: &mut R,
    shape: &[usize],
    lo: f64,
    hi: f64,
) -> ArrayD<F> {
    let mag: ArrayD<f64> = rand_uniform(rng, shape, lo, hi);
    let sign: ArrayD<f64> = rand_uniform(rng, shape, 0.0, 1.0);
    let mut out = mag;
    out.zip_mut_with(&sign, |m, &s| {
        if s < 0.5 {
            *m = -*m;
        }
    });
    out.mapv(|v| F::from_f64(v))
}

/// A tensor of distinct values spaced `step` apart in random order, so
/// max-style reductions stay locally linear under the probe step.
fn spread_values<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], step: f64) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let jig: ArrayD<f64> = rand_uniform(rng, &[n], -step / 5.0, step / 5.0);
    let flat: Vec<F> = order
        .iter()
        .enumerate()
        .map(|(i, &rank)| F::from_f64(rank as f64 * step + jig[[i]]))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), flat).expect("length is the product of the shape")
}

fn check_one_op<F: Scalar>(op: &'static str, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A wider probe step cuts float32 cancellation noise tenfold and is
    // safe where truncation stays far below the budget: the box filter
    // composed with a square is exactly quadratic under central
    // differences, the samplers are multilinear (exactly linear along
    // any single coordinate while the probe stays inside one lattice
    // cell, and the offsets below keep a wide margin), and the
    // structural-similarity, cross-entropy and contrastive losses are
    // smooth with curvature orders of magnitude under the noise saved.
    let wide = matches!(
        op,
        "ssim_loss"
            | "box_filter_valid"
            | "bce_with_logits_mean"
            | "bilinear_sample"
            | "deformable_sample"
            | "contrastive_loss"
    );
    let step = if wide { F::fd_step() * 10.0 } else { F::fd_step() };
    let tol = F::grad_tol();
    let u = |rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64| -> ArrayD<F> {
        rand_uniform(rng, shape, lo, hi)
    };
    let g = |rng: &mut ChaCha8Rng, shape: &[usize]| -> ArrayD<F> { randn(rng, shape) };

    // Inputs and roots are kept at modest magnitude: float32 central
    // differences lose |f| * eps / (2 step) to cancellation, so a root
    // near one would eat most of the 1e-3 budget before any real
    // gradient defect shows up.
    #[allow(clippy::type_complexity)]
    let (build, inputs, names): (Box<dyn Fn(&mut Tape<F>, &[Var]) -> Var>, Vec<ArrayD<F>>, Vec<&str>) =
        match op {
        "add" => (
            Box::new(|t, v| {
                let y = t.add(v[0], v[1]);
                t.mean_all(y)
            }),
            vec![g(&mut rng, &[2, 3, 4, 4]), g(&mut rng, &[2, 3, 4, 4])],
            vec!["a", "b"],
        ),
        "sub" => (
            Box::new(|t, v| {
                let y = t.sub(v[0], v[1]);
                t.mean_all(y)
            }),
            vec![g(&mut rng, &[2, 3, 4, 4]), g(&mut rng, &[2, 3, 4, 4])],
            vec!["a", "b"],
        ),
        "mul" => (
            Box::new(|t, v| {
                let y = t.mul(v[0], v[1]);
                t.mean_all(y)
            }),
            vec![g(&mut rng, &[2, 3, 4, 4]), g(&mut rng, &[2, 3, 4, 4])],
            vec!["a", "b"],
        ),
        "div" => (
            Box::new(|t, v| {
                let y = t.div(v[0], v[1]);
                t.mean_all(y)
            }),
            vec![
                g(&mut rng, &[2, 2, 3, 3]),
                signed_away_from_zero(&mut rng, &[2, 2, 3, 3], 0.5, 1.2),
            ],
            vec!["num", "den"],
        ),
        "mul_bcast" => (
            Box::new(|t, v| {
                let y = t.mul_bcast(v[0], v[1]);
                t.mean_all(y)
            }),
            vec![g(&mut rng, &[2, 3, 4, 4]), g(&mut rng, &[2, 1, 4, 4])],
            vec!["x", "mask"],
        ),
        "scale" => (
            Box::new(|t, v| {
                let y = t.scale(v[0], F::from_f64(0.37));
                t.mean_all(y)
            }),
            vec![g(&mut rng, &[3, 5])],
            vec!["x"],
        ),
        "add_scalar" => (
            Box::new(|t, v| {
                let y = t.add_scalar(v[0], F::from_f64(0.25));
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[3, 5], -0.5, 0.5)],
            vec!["x"],
        ),
        "neg" => (
            Box::new(|t, v| {
                let y = t.neg(v[0]);
                let z = t.mul(y, v[0]);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[2, 7], -0.8, 0.8)],
            vec!["x"],
        ),
        "abs" => (
            Box::new(|t, v| {
                let y = t.abs(v[0]);
                t.mean_all(y)
            }),
            vec![signed_away_from_zero(&mut rng, &[2, 3, 4, 4], 0.15, 0.5)],
            vec!["x"],
        ),
        "ln" => (
            Box::new(|t, v| {
                let y = t.ln(v[0]);
                t.mean_all(y)
            }),
            vec![u(&mut rng, &[2, 3, 3, 3], 0.5, 2.0)],
            vec!["x"],
        ),
        "sigmoid" => (
            Box::new(|t, v| {
                let y = t.sigmoid(v[0]);
                let m = t.mean_all(y);
                t.scale(m, F::from_f64(0.4))
            }),
            vec![g(&mut rng, &[2, 3, 4, 4])],
            vec!["x"],
        ),
        "relu" => (
            Box::new(|t, v| {
                let y = t.relu(v[0]);
                t.mean_all(y)
            }),
            vec![signed_away_from_zero(&mut rng, &[2, 3, 4, 4], 0.3, 1.0)],
            vec!["x"],
        ),
        "softplus" => (
            Box::new(|t, v| {
                let y = t.softplus(v[0]);
                let m = t.mean_all(y);
                t.scale(m, F::from_f64(0.4))
            }),
            vec![g(&mut rng, &[2, 3, 4, 4])],
            vec!["x"],
        ),
        "min_elem" => (
            Box::new(|t, v| {
                let y = t.min_elem(v[0], v[1]);
                let m = t.mean_all(y);
                t.scale(m, F::from_f64(0.5))
            }),
            {
                let a: ArrayD<F> = u(&mut rng, &[2, 2, 3, 3], 0.0, 1.0);
                let gap: ArrayD<f64> = rand_uniform(&mut rng, &[2, 2, 3, 3], 0.15, 0.5);
                let sign: ArrayD<f64> = rand_uniform(&mut rng, &[2, 2, 3, 3], 0.0, 1.0);
                let mut b = a.clone();
                ndarray::Zip::from(&mut b).and(&gap).and(&sign).for_each(|bv, &gp, &sn| {
                    let delta = if sn < 0.5 { -gp } else { gp };
                    *bv = *bv + F::from_f64(delta);
                });
                vec![a, b]
            },
            vec!["a", "b"],
        ),
        "mean_all" => (
            Box::new(|t, v| t.mean_all(v[0])),
            vec![g(&mut rng, &[2, 3, 4, 4])],
            vec!["x"],
        ),
        "sum_all" => (
            Box::new(|t, v| t.sum_all(v[0])),
            vec![u(&mut rng, &[3, 5], -0.8, 0.8)],
            vec!["x"],
        ),
        "mean_of" => (
            Box::new(|t, v| {
                let a = t.mean_all(v[0]);
                let b = t.sum_all(v[1]);
                let c = t.mean_all(v[2]);
                t.mean_of(&[a, b, c])
            }),
            vec![g(&mut rng, &[2, 3]), u(&mut rng, &[4], -0.5, 0.5), g(&mut rng, &[2, 2])],
            vec!["a", "b", "c"],
        ),
        "reshape" => (
            Box::new(|t, v| {
                let y = t.reshape(v[0], &[4, 2, 1, 1]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[2, 4], -1.0, 1.0)],
            vec!["x"],
        ),
        "concat_c" => (
            Box::new(|t, v| {
                let y = t.concat_c(v[0], v[1]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[2, 2, 3, 3], -1.0, 1.0), u(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)],
            vec!["a", "b"],
        ),
        "slice_c" => (
            Box::new(|t, v| {
                let y = t.slice_c(v[0], 1, 3);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[2, 4, 3, 3], -1.0, 1.0)],
            vec!["x"],
        ),
        "channel_mean" => (
            Box::new(|t, v| {
                let y = t.channel_mean(v[0]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![g(&mut rng, &[2, 4, 3, 3])],
            vec!["x"],
        ),
        "channel_max" => (
            Box::new(|t, v| {
                let y = t.channel_max(v[0]);
                let m = t.mean_all(y);
                t.scale(m, F::from_f64(0.3))
            }),
            vec![spread_values(&mut rng, &[2, 4, 3, 3], 0.02)],
            vec!["x"],
        ),
        "global_avg_pool" => (
            Box::new(|t, v| {
                let y = t.global_avg_pool(v[0]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![g(&mut rng, &[2, 3, 4, 4])],
            vec!["x"],
        ),
        "global_max_pool" => (
            Box::new(|t, v| {
                let y = t.global_max_pool(v[0]);
                let m = t.mean_all(y);
                t.scale(m, F::from_f64(0.2))
            }),
            vec![spread_values(&mut rng, &[2, 3, 4, 4], 0.02)],
            vec!["x"],
        ),
        "upsample_nearest2" => (
            Box::new(|t, v| {
                let y = t.upsample_nearest2(v[0]);
                let z = t.mul(y, y);
                let m = t.mean_all(z);
                t.scale(m, F::from_f64(0.3))
            }),
            vec![u(&mut rng, &[1, 2, 3, 3], -1.0, 1.0)],
            vec!["x"],
        ),
        "diff_w" => (
            Box::new(|t, v| {
                let y = t.diff_w(v[0]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[2, 2, 3, 5], -0.7, 0.7)],
            vec!["x"],
        ),
        "diff_h" => (
            Box::new(|t, v| {
                let y = t.diff_h(v[0]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[2, 2, 5, 3], -0.7, 0.7)],
            vec!["x"],
        ),
        "gather_cells" => (
            Box::new(|t, v| {
                let y = t.gather_cells(v[0], vec![(0, 0, 1), (1, 2, 0), (0, 2, 2), (0, 0, 1)]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)],
            vec!["x"],
        ),
        "matmul_nt" => (
            Box::new(|t, v| {
                let y = t.matmul_nt(v[0], v[1]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[3, 4], -0.6, 0.6), u(&mut rng, &[5, 4], -0.6, 0.6)],
            vec!["a", "b"],
        ),
        "logsumexp_rows" => (
            Box::new(|t, v| {
                let y = t.logsumexp_rows(v[0]);
                let m = t.mean_all(y);
                t.scale(m, F::from_f64(0.2))
            }),
            vec![u(&mut rng, &[4, 6], -1.0, 1.0)],
            vec!["x"],
        ),
        "diag" => (
            Box::new(|t, v| {
                let y = t.diag(v[0]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![u(&mut rng, &[4, 4], -1.0, 1.0)],
            vec!["x"],
        ),
        "l2_normalize_rows" => {
            // A fixed random functional of the normalized rows; the sum
            // of their squares is constant and would hide the Jacobian.
            let probe: ArrayD<F> = u(&mut rng, &[3, 6], -0.3, 0.3);
            (
                Box::new(move |t: &mut Tape<F>, v: &[Var]| {
                    let y = t.l2_normalize_rows(v[0], 1e-8);
                    let pv = t.constant(probe.clone());
                    let z = t.mul(y, pv);
                    t.sum_all(z)
                }),
                vec![g(&mut rng, &[3, 6])],
                vec!["x"],
            )
        }
        "softmax_c" => (
            Box::new(|t, v| {
                let y = t.softmax_c(v[0]);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![g(&mut rng, &[2, 3, 3, 3])],
            vec!["x"],
        ),
        "box_filter_valid" => (
            Box::new(|t, v| {
                let y = t.box_filter_valid(v[0], 3);
                let z = t.mul(y, y);
                t.mean_all(z)
            }),
            vec![g(&mut rng, &[1, 2, 5, 5])],
            vec!["x"],
        ),
        "bce_with_logits_mean" => {
            // Targets are held constant: the loss treats them as labels.
            let targets: ArrayD<F> = u(&mut rng, &[4, 3], 0.1, 0.9);
            (
                Box::new(move |t: &mut Tape<F>, v: &[Var]| {
                    let tv = t.constant(targets.clone());
                    t.bce_with_logits_mean(v[0], tv)
                }),
                vec![g(&mut rng, &[4, 3])],
                vec!["logits"],
            )
        }
        "conv2d" => (
            Box::new(|t, v| {
                let y = t.conv2d(v[0], v[1], v[2], 1, 1);
                t.mean_all(y)
            }),
            vec![
                u(&mut rng, &[1, 2, 5, 5], -0.5, 0.5),
                u(&mut rng, &[3, 2, 3, 3], -0.5, 0.5),
                u(&mut rng, &[3], -0.2, 0.2),
            ],
            vec!["x", "w", "b"],
        ),
        "bilinear_sample" => (
            Box::new(|t, v| {
                let y = t.bilinear_sample(v[0], v[1]);
                t.mean_all(y)
            }),
            {
                let x = g(&mut rng, &[1, 2, 5, 5]);
                // Sample points clear of the bilinear lattice corners.
                let base: ArrayD<f64> = rand_uniform(&mut rng, &[1, 2, 4, 4], 0.0, 3.0);
                let coords = base.mapv(|v| F::from_f64(v.floor() + 0.5));
                let jitter: ArrayD<F> = rand_uniform(&mut rng, &[1, 2, 4, 4], -0.2, 0.2);
                let mut c = coords;
                c.zip_mut_with(&jitter, |a, &b| *a = *a + b);
                vec![x, c]
            },
            vec!["x", "coords"],
        ),
        "deformable_sample" => (
            Box::new(|t, v| {
                let y = t.deformable_sample(v[0], v[1], v[2], v[3], v[4], v[5]);
                t.mean_all(y)
            }),
            {
                let x = u(&mut rng, &[1, 2, 4, 4], -0.8, 0.8);
                let w = u(&mut rng, &[2, 2, 3, 3], -0.8, 0.8);
                let b = u(&mut rng, &[2], -0.3, 0.3);
                let base: ArrayD<F> = rand_uniform(&mut rng, &[1, 2, 4, 4], 0.20, 0.30);
                let residual: ArrayD<F> = rand_uniform(&mut rng, &[1, 18, 4, 4], 0.05, 0.15);
                let modulation: ArrayD<F> = rand_uniform(&mut rng, &[1, 9, 4, 4], 0.2, 0.8);
                vec![x, w, b, base, residual, modulation]
            },
            vec!["x", "w", "b", "base", "residual", "modulation"],
        ),
        "contrastive_loss" => (
            Box::new(|t, v| {
                let a = t.l2_normalize_rows(v[0], 1e-8);
                let b = t.l2_normalize_rows(v[1], 1e-8);
                let l = t.info_nce(a, b, 0.5);
                t.scale(l, F::from_f64(0.3))
            }),
            vec![g(&mut rng, &[3, 5]), g(&mut rng, &[3, 5])],
            vec!["v", "i"],
        ),
        "mae_loss" => (
            Box::new(|t, v| t.mae_loss(v[0], v[1])),
            {
                let a: ArrayD<F> = u(&mut rng, &[1, 2, 4, 4], 0.0, 1.0);
                let gap: ArrayD<f64> = rand_uniform(&mut rng, &[1, 2, 4, 4], 0.15, 0.4);
                let sign: ArrayD<f64> = rand_uniform(&mut rng, &[1, 2, 4, 4], 0.0, 1.0);
                let mut b = a.clone();
                ndarray::Zip::from(&mut b).and(&gap).and(&sign).for_each(|bv, &gp, &sn| {
                    let delta = if sn < 0.5 { -gp } else { gp };
                    *bv = *bv + F::from_f64(delta);
                });
                vec![a, b]
            },
            vec!["a", "b"],
        ),
        // Audited with enlarged stabilisers: the production constants
        // leave window statistics too ill-conditioned for float32
        // finite differences, and the backward pass is identical.
        "ssim_loss" => (
            Box::new(|t, v| {
                let l = t.ssim_loss_with_constants(v[0], v[1], 3, 0.01, 0.03);
                t.scale(l, F::from_f64(0.4))
            }),
            vec![u(&mut rng, &[1, 1, 5, 5], 0.0, 1.0), u(&mut rng, &[1, 1, 5, 5], 0.0, 1.0)],
            vec!["x", "y"],
        ),
        "sparsity_loss" => (
            Box::new(|t, v| {
                let l = t.sparsity_loss(v[0]);
                t.scale(l, F::from_f64(0.4))
            }),
            vec![u(&mut rng, &[1, 1, 5, 5], 0.05, 0.95)],
            vec!["m"],
        ),
        "smoothness_loss" => (
            Box::new(|t, v| t.smoothness_loss(v[0])),
            {
                // Neighbour differences bounded away from zero so the
                // absolute value stays locally linear.
                let base = spread_values::<F, _>(&mut rng, &[1, 1, 4, 5], 0.02);
                vec![base]
            },
            vec!["m"],
        ),
        other => panic!("unknown gradient audit op {other}"),
    };
    let report = grad_check(build.as_ref(), &inputs, &names, step, tol)?;
    Ok(report.max_rel_err)
}

/// Audit every operation's gradients against finite differences in one
/// precision. `label` names the precision in the reports.
pub fn grad_suite<F: Scalar>(seeds: usize, base_seed: u64, label: &str) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::with_capacity(GRAD_OPS.len());
    for &op in GRAD_OPS {
        let mut worst = 0.0f64;
        for s in 0..seeds {
            let seed = base_seed
                .wrapping_add(7919u64.wrapping_mul(s as u64))
                .wrapping_add(op.bytes().map(u64::from).sum::<u64>());
            worst = worst.max(check_one_op::<F>(op, seed)?);
        }
        reports.push(CheckReport::new(format!("grad {op} ({label})"), seeds, worst, F::grad_tol()));
    }
    Ok(reports)
}

// ---- fault injection ----------------------------------------------------------

/// Compare the tape's convolution gradients against finite differences
/// of the reference implementation, optionally negating the analytic
/// weight gradient the way a sign bug in the backward pass would. The
/// caller expects `pass == false` when the fault is injected; anything
/// else means the audit is too loose to be trusted.
pub fn conv_fault_probe(inject: bool, seed: u64) -> CheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: ArrayD<f64> = randn(&mut rng, &[1, 2, 5, 5]);
    let w: ArrayD<f64> = he_conv(&mut rng, 3, 2, 3);
    let bias: ArrayD<f64> = randn(&mut rng, &[3]);
    let value = |x: &ArrayD<f64>, w: &ArrayD<f64>, bias: &ArrayD<f64>| -> f64 {
        let y = naive_conv(
            &x.clone().into_dimensionality().unwrap(),
            &w.clone().into_dimensionality().unwrap(),
            &bias
                .clone()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap(),
            1,
        );
        y.sum() / y.len() as f64
    };

    let mut tape: Tape<f64> = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let wv = tape.leaf(w.clone(), true);
    let bv = tape.leaf(bias.clone(), true);
    let y = tape.conv2d(xv, wv, bv, 1, 1);
    let root = tape.mean_all(y);
    let grads = tape.backward(root);
    let mut dw = grads.get(wv).expect("weights reach the loss").clone();
    if inject {
        dw.mapv_inplace(|v| -v);
    }

    let step = 1e-5;
    let mut worst = 0.0f64;
    let mut probe = w.clone();
    for idx in 0..probe.len() {
        let flat = probe.as_slice_mut().expect("contiguous weights");
        let orig = flat[idx];
        flat[idx] = orig + step;
        let up = value(&x, &probe, &bias);
        let flat = probe.as_slice_mut().expect("contiguous weights");
        flat[idx] = orig - step;
        let down = value(&x, &probe, &bias);
        let flat = probe.as_slice_mut().expect("contiguous weights");
        flat[idx] = orig;
        let numeric = (up - down) / (2.0 * step);
        let analytic = dw.as_slice().expect("contiguous gradient")[idx];
        // The floor keeps finite-difference noise on near-zero entries
        // from masquerading as a fault.
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
        worst = worst.max(rel);
    }
    let name = if inject { "conv2d backward with injected sign fault" } else { "conv2d backward" };
    CheckReport::new(name, probe.len(), worst, 1e-5)
}

/// Run the full verification battery. Returns every report plus the
/// overall verdict.
pub fn run_all(trials: usize, cases: usize, seeds: usize, seed: u64) -> Result<(Vec<CheckReport>, bool)> {
    let mut reports = oracle_suite(trials, seed);
    reports.push(degeneracy_suite(cases, seed));
    reports.push(conv_fault_probe(false, seed));
    reports.extend(grad_suite::<f32>(seeds, seed, "f32")?);
    reports.extend(grad_suite::<f64>(seeds, seed, "f64")?);
    let ok = reports.iter().all(|r| r.pass);
    Ok((reports, ok))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_suite_agrees_with_references() {
        for r in oracle_suite(12, 99) {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn degeneracy_matches_convolution() {
        let r = degeneracy_suite(8, 42);
        assert!(r.pass, "{}", r.line());
    }

    #[test]
    fn gradient_audit_passes_in_both_precisions() {
        for r in grad_suite::<f64>(2, 17, "f64").unwrap() {
            assert!(r.pass, "{}", r.line());
        }
        for r in grad_suite::<f32>(2, 18, "f32").unwrap() {
            assert!(r.pass, "{}", r.line());
        }
    }

    // Slow soak used by the acceptance battery; run with --ignored.
    #[test]
    #[ignore]
    fn gradient_audit_soak_at_twenty_seeds() {
        for r in grad_suite::<f32>(20, 1234, "f32").unwrap() {
            assert!(r.pass, "{}", r.line());
        }
        for r in grad_suite::<f64>(20, 1234, "f64").unwrap() {
            assert!(r.pass, "{}", r.line());
        }
    }

    #[test]
    fn injected_sign_fault_is_caught_and_clean_pass_still_passes() {
        let clean = conv_fault_probe(false, 7);
        assert!(clean.pass, "healthy backward must pass: {}", clean.line());
        let faulty = conv_fault_probe(true, 7);
        assert!(!faulty.pass, "a negated weight gradient must be flagged: {}", faulty.line());
    }
}

