//! Alignment-branch loss terms and their composition.
//!
//! The alignment objective has three per-scale parts: a contrastive term
//! that pulls matched visible/infrared embeddings together, a spatial term
//! that mixes structural similarity with mean absolute error, and an
//! attention regulariser that keeps modality masks sparse and smooth. The
//! scale totals are averaged and added to the detection loss with a single
//! balance weight. Every composite is built from tape ops so the breakdown
//! reported during training is the same graph the optimiser differentiates.

use ndarray::{Array2, Array4, ArrayD, IxDyn};

use crate::error::{CodafError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Weight of the structural-similarity term inside the spatial loss.
pub const SSIM_WEIGHT: f64 = 0.3;
/// Weight of the mean-absolute-error term inside the spatial loss.
pub const MAE_WEIGHT: f64 = 0.5;
/// Weight of the smoothness term inside the attention regulariser.
pub const SMOOTH_WEIGHT: f64 = 0.1;
/// Stabiliser inside the sparsity logarithm.
pub const SPARSITY_EPS: f64 = 1e-8;
/// Default window for the structural-similarity filter.
pub const DEFAULT_SSIM_WINDOW: usize = 7;

impl<F: Scalar> Tape<F> {
    /// One-directional contrastive loss over L2-normalised embeddings
    /// [N, D]: each visible row is scored against every infrared row and
    /// must win its own diagonal entry.
    pub fn info_nce(&mut self, v: Var, i: Var, tau: f64) -> Var {
        assert!(tau > 0.0, "info_nce temperature must be positive");
        let vs = self.value(v).shape().to_vec();
        let is = self.value(i).shape().to_vec();
        assert_eq!(vs, is, "info_nce embeddings must agree in shape");
        let sim = self.matmul_nt(v, i);
        let scaled = self.scale(sim, F::from_f64(1.0 / tau));
        let lse = self.logsumexp_rows(scaled);
        let pos = self.diag(scaled);
        let gap = self.sub(lse, pos);
        self.mean_all(gap)
    }

    /// Mean absolute error between two equally shaped maps.
    pub fn mae_loss(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let ad = self.abs(d);
        self.mean_all(ad)
    }

    /// Structural-similarity loss, 1 - mean SSIM over valid windows. The
    /// stabilising constants derive from the current dynamic range of the
    /// two maps and are treated as constants by the gradient.
    pub fn ssim_loss(&mut self, x: Var, y: Var, window: usize) -> Var {
        let (c1, c2) = ssim_constants(self.value(x), self.value(y));
        self.ssim_loss_with_constants(x, y, window, c1, c2)
    }

    /// Structural-similarity loss with caller-fixed stabilising constants.
    pub fn ssim_loss_with_constants(
        &mut self,
        x: Var,
        y: Var,
        window: usize,
        c1: f64,
        c2: f64,
    ) -> Var {
        let s = self.value(x).shape().to_vec();
        assert_eq!(s, self.value(y).shape(), "ssim maps must agree in shape");
        assert_eq!(s.len(), 4, "ssim expects [B, C, H, W]");
        let win = window.min(s[2]).min(s[3]).max(1);
        let mu_x = self.box_filter_valid(x, win);
        let mu_y = self.box_filter_valid(y, win);
        let xx = self.mul(x, x);
        let yy = self.mul(y, y);
        let xy = self.mul(x, y);
        let mxx = self.box_filter_valid(xx, win);
        let myy = self.box_filter_valid(yy, win);
        let mxy = self.box_filter_valid(xy, win);
        let mu_xx = self.mul(mu_x, mu_x);
        let mu_yy = self.mul(mu_y, mu_y);
        let mu_xy = self.mul(mu_x, mu_y);
        let var_x = self.sub(mxx, mu_xx);
        let var_y = self.sub(myy, mu_yy);
        let cov = self.sub(mxy, mu_xy);
        let n1 = {
            let t = self.scale(mu_xy, F::from_f64(2.0));
            self.add_scalar(t, F::from_f64(c1))
        };
        let n2 = {
            let t = self.scale(cov, F::from_f64(2.0));
            self.add_scalar(t, F::from_f64(c2))
        };
        let d1 = {
            let t = self.add(mu_xx, mu_yy);
            self.add_scalar(t, F::from_f64(c1))
        };
        let d2 = {
            let t = self.add(var_x, var_y);
            self.add_scalar(t, F::from_f64(c2))
        };
        let num = self.mul(n1, n2);
        let den = self.mul(d1, d2);
        let map = self.div(num, den);
        let mean = self.mean_all(map);
        let neg = self.neg(mean);
        self.add_scalar(neg, F::one())
    }

    /// Entropy-style sparsity pressure on a mask in [0, 1]. Exactly zero
    /// masks contribute zero; a mask pinned at one lands a hair below zero
    /// because of the stabiliser inside the logarithm.
    pub fn sparsity_loss(&mut self, m: Var) -> Var {
        let shifted = self.add_scalar(m, F::from_f64(SPARSITY_EPS));
        let lg = self.ln(shifted);
        let p = self.mul(m, lg);
        let mean = self.mean_all(p);
        self.neg(mean)
    }

    /// Mean absolute forward difference along both spatial axes. Axes of
    /// extent one contribute nothing.
    pub fn smoothness_loss(&mut self, m: Var) -> Var {
        let s = self.value(m).shape().to_vec();
        assert_eq!(s.len(), 4, "smoothness expects [B, C, H, W]");
        let mut terms = Vec::new();
        if s[3] > 1 {
            let dw = self.diff_w(m);
            let aw = self.abs(dw);
            terms.push(self.mean_all(aw));
        }
        if s[2] > 1 {
            let dh = self.diff_h(m);
            let ah = self.abs(dh);
            terms.push(self.mean_all(ah));
        }
        match terms.len() {
            0 => self.constant(ArrayD::zeros(IxDyn(&[]))),
            1 => terms[0],
            _ => self.add(terms[0], terms[1]),
        }
    }

    /// Attention regulariser: sparsity plus weighted smoothness.
    pub fn attention_loss(&mut self, m: Var) -> Var {
        let sp = self.sparsity_loss(m);
        let sm = self.smoothness_loss(m);
        let smw = self.scale(sm, F::from_f64(SMOOTH_WEIGHT));
        self.add(sp, smw)
    }

    /// Spatial alignment loss between the aligned visible map and the
    /// infrared map: weighted structural similarity plus weighted MAE.
    pub fn spatial_alignment_loss(&mut self, aligned: Var, ir: Var, window: usize) -> Var {
        let ss = self.ssim_loss(aligned, ir, window);
        let ma = self.mae_loss(aligned, ir);
        let a = self.scale(ss, F::from_f64(SSIM_WEIGHT));
        let b = self.scale(ma, F::from_f64(MAE_WEIGHT));
        self.add(a, b)
    }
}

/// Stabilising constants from the joint dynamic range of two maps. The
/// range is floored so constant maps stay well conditioned.
pub fn ssim_constants<F: Scalar>(x: &ArrayD<F>, y: &ArrayD<F>) -> (f64, f64) {
    let range = |a: &ArrayD<F>| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for v in a.iter() {
            let f = v.as_f64();
            lo = lo.min(f);
            hi = hi.max(f);
        }
        hi - lo
    };
    let l = range(x).max(range(y)).max(1e-3);
    ((0.01 * l).powi(2), (0.03 * l).powi(2))
}

/// One bundle of alignment-loss terms: five primitives plus the weighted
/// aggregates composed from them. The same shape serves a single scale
/// and the across-scale means. Because each aggregate is a one- or
/// two-addition composition of terms that are themselves reported, a
/// logged identity can be re-checked without re-running anything.
#[derive(Clone, Copy)]
pub struct AlignmentTerms {
    pub contrast: Var,
    pub ssim: Var,
    pub mae: Var,
    pub sparse: Var,
    pub smooth: Var,
    pub sm: Var,
    pub attn: Var,
    pub total: Var,
}

/// Derive the weighted aggregates from already-built primitive terms.
pub fn compose_terms<F: Scalar>(
    tape: &mut Tape<F>,
    contrast: Var,
    ssim: Var,
    mae: Var,
    sparse: Var,
    smooth: Var,
) -> AlignmentTerms {
    let ws = tape.scale(ssim, F::from_f64(SSIM_WEIGHT));
    let wm = tape.scale(mae, F::from_f64(MAE_WEIGHT));
    let sm = tape.add(ws, wm);
    let wsmo = tape.scale(smooth, F::from_f64(SMOOTH_WEIGHT));
    let attn = tape.add(sparse, wsmo);
    let partial = tape.add(contrast, sm);
    let total = tape.add(partial, attn);
    AlignmentTerms { contrast, ssim, mae, sparse, smooth, sm, attn, total }
}

/// Build one scale's alignment loss from its embeddings, feature maps and
/// attention mask.
#[allow(clippy::too_many_arguments)]
pub fn alignment_scale<F: Scalar>(
    tape: &mut Tape<F>,
    v_emb: Var,
    i_emb: Var,
    aligned: Var,
    ir: Var,
    attn_map: Var,
    tau: f64,
    window: usize,
) -> AlignmentTerms {
    let contrast = tape.info_nce(v_emb, i_emb, tau);
    let ssim = tape.ssim_loss(aligned, ir, window);
    let mae = tape.mae_loss(aligned, ir);
    let sparse = tape.sparsity_loss(attn_map);
    let smooth = tape.smoothness_loss(attn_map);
    compose_terms(tape, contrast, ssim, mae, sparse, smooth)
}

/// Average the per-scale terms, then re-derive the aggregates from the
/// averaged primitives. Means and weighted sums commute, so the result
/// equals the mean of the per-scale totals while keeping every reported
/// identity a local recomposition.
pub fn alignment_total<F: Scalar>(tape: &mut Tape<F>, scales: &[AlignmentTerms]) -> AlignmentTerms {
    assert!(!scales.is_empty(), "alignment needs at least one scale");
    let mean = |tape: &mut Tape<F>, pick: fn(&AlignmentTerms) -> Var| {
        let vs: Vec<Var> = scales.iter().map(pick).collect();
        tape.mean_of(&vs)
    };
    let contrast = mean(tape, |s| s.contrast);
    let ssim = mean(tape, |s| s.ssim);
    let mae = mean(tape, |s| s.mae);
    let sparse = mean(tape, |s| s.sparse);
    let smooth = mean(tape, |s| s.smooth);
    compose_terms(tape, contrast, ssim, mae, sparse, smooth)
}

/// Full objective: detection loss plus weighted alignment loss.
pub fn total_loss<F: Scalar>(tape: &mut Tape<F>, det: Var, align: Var, lambda: f64) -> Var {
    let w = tape.scale(align, F::from_f64(lambda));
    tape.add(det, w)
}

/// Scalar snapshot of every loss component for logging and invariant
/// checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub det: f64,
    pub contrast: f64,
    pub ssim: f64,
    pub mae: f64,
    pub sparse: f64,
    pub smooth: f64,
    pub sm: f64,
    pub attn: f64,
    pub align_total: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Read every component off the tape after a forward pass.
    pub fn from_tape<F: Scalar>(
        tape: &Tape<F>,
        det: Var,
        align: &AlignmentTerms,
        total: Var,
    ) -> Self {
        LossBreakdown {
            det: tape.scalar(det),
            contrast: tape.scalar(align.contrast),
            ssim: tape.scalar(align.ssim),
            mae: tape.scalar(align.mae),
            sparse: tape.scalar(align.sparse),
            smooth: tape.scalar(align.smooth),
            sm: tape.scalar(align.sm),
            attn: tape.scalar(align.attn),
            align_total: tape.scalar(align.total),
            total: tape.scalar(total),
        }
    }

    /// A breakdown with no alignment branch: the total is the detection
    /// loss and every alignment slot reads zero.
    pub fn detection_only(det: f64, total: f64) -> Self {
        LossBreakdown {
            det,
            contrast: 0.0,
            ssim: 0.0,
            mae: 0.0,
            sparse: 0.0,
            smooth: 0.0,
            sm: 0.0,
            attn: 0.0,
            align_total: 0.0,
            total,
        }
    }

    /// Largest violation across the four composition identities: the two
    /// weighted aggregates, the alignment total, and the full objective.
    pub fn identity_gap(&self, lambda: f64) -> f64 {
        let sm = (SSIM_WEIGHT * self.ssim + MAE_WEIGHT * self.mae - self.sm).abs();
        let attn = (self.sparse + SMOOTH_WEIGHT * self.smooth - self.attn).abs();
        let parts = (self.contrast + self.sm + self.attn - self.align_total).abs();
        let full = (self.det + lambda * self.align_total - self.total).abs();
        sm.max(attn).max(parts).max(full)
    }

    /// Fail with a numerical error if any composition identity drifts.
    pub fn verify(&self, lambda: f64, tol: f64) -> Result<()> {
        let gap = self.identity_gap(lambda);
        if !gap.is_finite() || gap > tol {
            return Err(CodafError::numeric(format!(
                "loss composition identities violated by {gap:.3e} (tolerance {tol:.1e}): {self:?}"
            )));
        }
        Ok(())
    }
}

// ---- value-level wrappers -----------------------------------------------------

/// Contrastive loss of two embedding matrices without building gradients.
pub fn info_nce_value<F: Scalar>(v: &Array2<F>, i: &Array2<F>, tau: f64) -> Result<f64> {
    if v.dim() != i.dim() {
        return Err(CodafError::shape(format!(
            "info_nce: embedding shapes {:?} vs {:?}",
            v.dim(),
            i.dim()
        )));
    }
    if tau <= 0.0 {
        return Err(CodafError::config(format!("info_nce: temperature {tau} must be positive")));
    }
    let mut tape: Tape<F> = Tape::new();
    let vv = tape.leaf(v.clone().into_dyn(), false);
    let iv = tape.leaf(i.clone().into_dyn(), false);
    let l = tape.info_nce(vv, iv, tau);
    Ok(tape.scalar(l))
}

/// Structural-similarity loss of two maps without building gradients.
pub fn ssim_loss_value<F: Scalar>(x: &Array4<F>, y: &Array4<F>, window: usize) -> Result<f64> {
    if x.dim() != y.dim() {
        return Err(CodafError::shape(format!(
            "ssim: map shapes {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    let mut tape: Tape<F> = Tape::new();
    let xv = tape.leaf(x.clone().into_dyn(), false);
    let yv = tape.leaf(y.clone().into_dyn(), false);
    let l = tape.ssim_loss(xv, yv, window);
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{naive_info_nce, naive_ssim};
    use crate::primitives::grad_check;
    use crate::tensor::{rand_uniform, randn};
    use ndarray::{Array2, ArrayD};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn l2_rows(a: &mut Array2<f64>) {
        for mut r in a.rows_mut() {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            r.mapv_inplace(|v| v / n);
        }
    }

    #[test]
    fn info_nce_single_pair_is_exactly_zero() {
        let v = Array2::from_shape_vec((1, 3), vec![0.6, 0.8, 0.0]).unwrap();
        let i = Array2::from_shape_vec((1, 3), vec![0.0, 1.0, 0.0]).unwrap();
        let l = info_nce_value(&v, &i, 0.07).unwrap();
        assert_eq!(l, 0.0, "a single pair has no negatives to lose against");
    }

    #[test]
    fn info_nce_of_an_indistinguishable_batch_is_log_n() {
        // Every row identical: each positive ties with every negative, so
        // the loss collapses to the log of the batch size.
        for n in [2usize, 5, 16] {
            let row = vec![0.6, 0.0, 0.8];
            let flat: Vec<f64> = row.iter().cycle().take(3 * n).copied().collect();
            let v = Array2::from_shape_vec((n, 3), flat).unwrap();
            let l = info_nce_value(&v, &v.clone(), 0.07).unwrap();
            let want = (n as f64).ln();
            assert!(
                (l - want).abs() < 1e-12,
                "identical batch of {n}: got {l}, want ln {n} = {want}"
            );
        }
    }

    #[test]
    fn info_nce_antipodal_pair_matches_closed_form() {
        let v = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let l = info_nce_value(&v, &v.clone(), 1.0).unwrap();
        let want = (1.0 + (-2.0f64).exp()).ln();
        assert!((l - want).abs() < 1e-12, "antipodal pair: got {l}, want {want}");
    }

    #[test]
    fn info_nce_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for n in [2usize, 3, 6] {
            let mut v: Array2<f64> =
                randn::<f64, _>(&mut rng, &[n, 5]).into_dimensionality().unwrap();
            let mut i: Array2<f64> =
                randn::<f64, _>(&mut rng, &[n, 5]).into_dimensionality().unwrap();
            l2_rows(&mut v);
            l2_rows(&mut i);
            let got = info_nce_value(&v, &i, 0.07).unwrap();
            let want = naive_info_nce(&v, &i, 0.07);
            assert!(
                (got - want).abs() < 1e-10,
                "contrastive loss disagrees with reference at n={n}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn info_nce_gradients_check_through_normalisation() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let v: ArrayD<f64> = randn(&mut rng, &[3, 4]);
        let i: ArrayD<f64> = randn(&mut rng, &[3, 4]);
        let report = grad_check(
            &|t, vs| {
                let vn = t.l2_normalize_rows(vs[0], 1e-12);
                let inorm = t.l2_normalize_rows(vs[1], 1e-12);
                t.info_nce(vn, inorm, 0.07)
            },
            &[v, i],
            &["visible", "infrared"],
            f64::fd_step(),
            f64::grad_tol(),
        )
        .unwrap();
        assert!(report.pass, "contrastive gradients:\n{}", report.lines().join("\n"));
    }

    #[test]
    fn ssim_loss_of_identical_maps_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let x: ArrayD<f64> = rand_uniform(&mut rng, &[1, 2, 6, 6], 0.0, 1.0);
        let x4 = x.clone().into_dimensionality().unwrap();
        let l = ssim_loss_value::<f64>(&x4, &x4.clone(), 7).unwrap();
        assert_eq!(l, 0.0, "identical maps share every intermediate, loss cancels exactly");
    }

    #[test]
    fn ssim_loss_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        for (shape, win) in [([1usize, 1, 6, 5], 3usize), ([2, 2, 5, 5], 7), ([1, 1, 2, 8], 7)] {
            let x: ArrayD<f64> = rand_uniform(&mut rng, &shape, 0.0, 1.0);
            let y: ArrayD<f64> = rand_uniform(&mut rng, &shape, 0.0, 1.0);
            let x4 = x.into_dimensionality().unwrap();
            let y4 = y.into_dimensionality().unwrap();
            let got = ssim_loss_value::<f64>(&x4, &y4, win).unwrap();
            let want = naive_ssim(&x4, &y4, win);
            assert!(
                (got - want).abs() < 1e-10,
                "ssim loss disagrees with reference for {shape:?} win {win}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn ssim_gradients_check_with_fixed_constants() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        let x: ArrayD<f64> = rand_uniform(&mut rng, &[1, 1, 5, 5], 0.0, 1.0);
        let y: ArrayD<f64> = rand_uniform(&mut rng, &[1, 1, 5, 5], 0.0, 1.0);
        let report = grad_check(
            &|t, vs| t.ssim_loss_with_constants(vs[0], vs[1], 3, 1e-4, 9e-4),
            &[x, y],
            &["x", "y"],
            f64::fd_step(),
            f64::grad_tol(),
        )
        .unwrap();
        assert!(report.pass, "ssim gradients:\n{}", report.lines().join("\n"));
    }

    #[test]
    fn sparsity_of_half_mask_is_half_log_two() {
        let mut tape: Tape<f64> = Tape::new();
        let m = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 4, 4]), 0.5), false);
        let l = tape.sparsity_loss(m);
        let got = tape.scalar(l);
        let want = 0.5 * (2.0f64).ln();
        assert!(
            (got - want).abs() < 2e-8,
            "uniform 0.5 mask: got {got}, want {want} up to the log stabiliser"
        );
    }

    #[test]
    fn sparsity_of_saturated_mask_is_tiny_negative() {
        let mut tape: Tape<f64> = Tape::new();
        let m = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0), false);
        let l = tape.sparsity_loss(m);
        let got = tape.scalar(l);
        assert!(got < 0.0 && got > -2e-8, "all-ones mask sits just below zero, got {got}");
    }

    #[test]
    fn smoothness_of_column_step_is_inverse_width() {
        for w in [4usize, 7, 10] {
            let mut m = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 3, w]));
            for i in 0..3 {
                for j in w / 2..w {
                    m[IxDyn(&[0, 0, i, j])] = 1.0;
                }
            }
            let mut tape: Tape<f64> = Tape::new();
            let mv = tape.leaf(m, false);
            let l = tape.smoothness_loss(mv);
            let got = tape.scalar(l);
            let want = 1.0 / (w as f64 - 1.0);
            assert!(
                (got - want).abs() < 1e-12,
                "single column step at width {w}: got {got}, want {want}"
            );
        }
    }

    #[test]
    fn smoothness_handles_degenerate_extents() {
        let mut tape: Tape<f64> = Tape::new();
        let point = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 1, 1]), 0.7), false);
        let l = tape.smoothness_loss(point);
        assert_eq!(tape.scalar(l), 0.0, "a single cell has no differences");

        let mut row = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 1, 4]));
        row[IxDyn(&[0, 0, 0, 2])] = 1.0;
        let rv = tape.leaf(row, false);
        let lr = tape.smoothness_loss(rv);
        let got = tape.scalar(lr);
        assert!((got - 2.0 / 3.0).abs() < 1e-12, "1-row map uses only width differences: {got}");
    }

    #[test]
    fn smoothness_prefers_coherent_regions_over_checkerboard() {
        let mut checker = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 4, 4]));
        let mut split = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 4, 4]));
        for i in 0..4 {
            for j in 0..4 {
                if (i + j) % 2 == 0 {
                    checker[IxDyn(&[0, 0, i, j])] = 1.0;
                }
                if j >= 2 {
                    split[IxDyn(&[0, 0, i, j])] = 1.0;
                }
            }
        }
        let mut tape: Tape<f64> = Tape::new();
        let cv = tape.leaf(checker, false);
        let sv = tape.leaf(split, false);
        let lc = tape.smoothness_loss(cv);
        let ls = tape.smoothness_loss(sv);
        assert!(
            tape.scalar(lc) > tape.scalar(ls),
            "checkerboard must cost more than a half split"
        );
    }

    #[test]
    fn attention_loss_composes_sparsity_and_smoothness() {
        let mut rng = ChaCha8Rng::seed_from_u64(36);
        let m: ArrayD<f64> = rand_uniform(&mut rng, &[2, 1, 5, 5], 0.0, 1.0);
        let mut tape: Tape<f64> = Tape::new();
        let mv = tape.leaf(m, false);
        let total = tape.attention_loss(mv);
        let sp = tape.sparsity_loss(mv);
        let sm = tape.smoothness_loss(mv);
        let want = tape.scalar(sp) + SMOOTH_WEIGHT * tape.scalar(sm);
        let got = tape.scalar(total);
        assert!((got - want).abs() < 1e-12, "attention loss identity: {got} vs {want}");
    }

    #[test]
    fn spatial_loss_composes_ssim_and_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let a: ArrayD<f64> = rand_uniform(&mut rng, &[1, 2, 6, 6], 0.0, 1.0);
        let b: ArrayD<f64> = rand_uniform(&mut rng, &[1, 2, 6, 6], 0.0, 1.0);
        let mut tape: Tape<f64> = Tape::new();
        let av = tape.leaf(a, false);
        let bv = tape.leaf(b, false);
        let total = tape.spatial_alignment_loss(av, bv, DEFAULT_SSIM_WINDOW);
        let ss = tape.ssim_loss(av, bv, DEFAULT_SSIM_WINDOW);
        let ma = tape.mae_loss(av, bv);
        let want = SSIM_WEIGHT * tape.scalar(ss) + MAE_WEIGHT * tape.scalar(ma);
        let got = tape.scalar(total);
        assert!((got - want).abs() < 1e-12, "spatial loss identity: {got} vs {want}");
    }

    #[test]
    fn breakdown_identities_hold_across_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let mut tape: Tape<f64> = Tape::new();
        let mut scales = Vec::new();
        for _ in 0..3 {
            let mut vr: Array2<f64> =
                randn::<f64, _>(&mut rng, &[4, 8]).into_dimensionality().unwrap();
            let mut ir: Array2<f64> =
                randn::<f64, _>(&mut rng, &[4, 8]).into_dimensionality().unwrap();
            l2_rows(&mut vr);
            l2_rows(&mut ir);
            let v_emb = tape.leaf(vr.into_dyn(), false);
            let i_emb = tape.leaf(ir.into_dyn(), false);
            let aligned = tape.leaf(rand_uniform(&mut rng, &[1, 2, 6, 6], 0.0, 1.0), false);
            let irmap = tape.leaf(rand_uniform(&mut rng, &[1, 2, 6, 6], 0.0, 1.0), false);
            let attn = tape.leaf(rand_uniform(&mut rng, &[1, 1, 6, 6], 0.0, 1.0), false);
            scales.push(alignment_scale(
                &mut tape,
                v_emb,
                i_emb,
                aligned,
                irmap,
                attn,
                0.07,
                DEFAULT_SSIM_WINDOW,
            ));
        }
        let align = alignment_total(&mut tape, &scales);
        let det = tape.leaf(ArrayD::from_elem(IxDyn(&[]), 1.75), false);
        let lambda = 0.1;
        let total = total_loss(&mut tape, det, align.total, lambda);
        let breakdown = LossBreakdown::from_tape(&tape, det, &align, total);
        assert!(
            breakdown.identity_gap(lambda) < 1e-12,
            "composition identities drifted: {breakdown:?}"
        );
        breakdown.verify(lambda, 1e-6).unwrap();
        let wrong = LossBreakdown { total: breakdown.total + 0.5, ..breakdown };
        assert!(wrong.verify(lambda, 1e-6).is_err(), "a broken total must be caught");
    }

    #[test]
    fn value_wrappers_reject_mismatched_shapes() {
        let v = Array2::<f64>::zeros((2, 3));
        let i = Array2::<f64>::zeros((3, 3));
        assert!(info_nce_value(&v, &i, 0.07).is_err(), "row counts must agree");
        assert!(
            info_nce_value(&v, &v.clone(), 0.0).is_err(),
            "zero temperature is rejected"
        );
        let a = Array4::<f64>::zeros((1, 1, 4, 4));
        let b = Array4::<f64>::zeros((1, 1, 4, 5));
        assert!(ssim_loss_value(&a, &b, 7).is_err(), "map shapes must agree");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn info_nce_is_never_negative(
            seed in 0u64..1000,
            n in 1usize..5,
            tau in prop::sample::select(vec![0.07, 0.5, 1.0]),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v: Array2<f64> = randn::<f64, _>(&mut rng, &[n, 4]).into_dimensionality().unwrap();
            let mut i: Array2<f64> = randn::<f64, _>(&mut rng, &[n, 4]).into_dimensionality().unwrap();
            l2_rows(&mut v);
            l2_rows(&mut i);
            let l = info_nce_value(&v, &i, tau).unwrap();
            prop_assert!(l >= -1e-12, "log-sum-exp dominates its own diagonal, got {l}");
        }

        #[test]
        fn ssim_loss_stays_in_band_for_spread_maps(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut x: ArrayD<f64> = rand_uniform(&mut rng, &[1, 1, 5, 5], 0.2, 0.8);
            let y: ArrayD<f64> = rand_uniform(&mut rng, &[1, 1, 5, 5], 0.0, 1.0);
            x[IxDyn(&[0, 0, 0, 0])] = 0.0;
            x[IxDyn(&[0, 0, 4, 4])] = 1.0;
            let l = ssim_loss_value::<f64>(
                &x.into_dimensionality().unwrap(),
                &y.into_dimensionality().unwrap(),
                3,
            )
            .unwrap();
            prop_assert!((0.0..=2.0).contains(&l), "similarity lives in [-1, 1], loss {l}");
        }

        #[test]
        fn sparsity_is_bounded_on_unit_masks(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m: ArrayD<f64> = rand_uniform(&mut rng, &[1, 1, 4, 4], 0.0, 1.0);
            let mut tape: Tape<f64> = Tape::new();
            let mv = tape.leaf(m, false);
            let l = tape.sparsity_loss(mv);
            let got = tape.scalar(l);
            prop_assert!(got >= -2e-8, "sparsity can dip only by the stabiliser, got {got}");
            prop_assert!(got <= 0.37, "entropy of a unit mask peaks at 1/e, got {got}");
        }
    }
}
