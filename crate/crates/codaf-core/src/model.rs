//! The two-stream detector: backbone, per-scale alignment and fusion, a
//! top-down neck and an anchor-free detection head.
//!
//! Both modalities run through structurally identical (separately
//! weighted) stride-2 stacks. At the three coarsest scales the visible
//! features are aligned onto the infrared grid, fused, then merged
//! top-down into a shared-width pyramid. The head predicts per-cell class
//! logits and box distances; targets come from centre sampling in the
//! infrared frame. Every switch that ablations toggle lives in
//! `ModelConfig`, and disabled branches register no parameters at all.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dafm::{dafm_forward, register_dafm_params, DafmConfig};
use crate::error::{CodafError, Result};
use crate::eval::Detection;
use crate::losses::{
    alignment_scale, alignment_total, compose_terms, total_loss, AlignmentTerms, LossBreakdown,
};
use crate::osa::{osa_forward, register_embed_params, register_osa_params, sid_embed, OsaConfig};
use crate::params::{he_conv, zeros, Graph, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Number of fused pyramid scales.
pub const NUM_SCALES: usize = 3;
/// Strides of the fused scales relative to the input image.
pub const STRIDES: [usize; NUM_SCALES] = [8, 16, 32];
/// Upper size bound (max side, pixels) routed to each scale.
const SIZE_RANGES: [f64; NUM_SCALES - 1] = [32.0, 64.0];
/// Centre-sampling radius in strides.
const CENTER_RADIUS: f64 = 1.5;
/// Negative cells sampled per positive for the classification loss.
const NEG_PER_POS: usize = 3;
/// Classification cells sampled when an image batch has no objects.
const MIN_NEG_CELLS: usize = 8;

/// Every switch and width of the detector.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub classes: usize,
    pub image_size: usize,
    /// Channel widths at strides 8, 16 and 32.
    pub channels: [usize; NUM_SCALES],
    pub embed_dim: usize,
    pub neck_channels: usize,
    pub head_channels: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Weight of the alignment loss inside the total.
    pub lambda: f64,
    pub ssim_window: usize,
    /// Offset-guided alignment of the visible stream.
    pub osa: bool,
    /// Which of the three scales align (ignored with `osa` off).
    pub active_stages: [bool; NUM_SCALES],
    /// Contrastive embedding loss.
    pub contrastive: bool,
    /// Per-position modality gating in the fusion block.
    pub magn: bool,
    /// Channel/spatial reweighting in the fusion block.
    pub dacm: bool,
    /// Drive alignment attention from the visible stream instead.
    pub attention_from_visible: bool,
    /// Read offset refinements at the unshifted position.
    pub residual_read_at_center: bool,
    pub score_thresh: f64,
    pub nms_iou: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            classes: 3,
            image_size: 128,
            channels: [32, 64, 128],
            embed_dim: 64,
            neck_channels: 64,
            head_channels: 32,
            tau: 0.07,
            lambda: 0.1,
            ssim_window: 7,
            osa: true,
            active_stages: [true; NUM_SCALES],
            contrastive: true,
            magn: true,
            dacm: true,
            attention_from_visible: false,
            residual_read_at_center: false,
            score_thresh: 0.05,
            nms_iou: 0.5,
        }
    }
}

impl ModelConfig {
    /// Element-wise-addition baseline: no alignment, no gating, no
    /// reweighting, detection loss only.
    pub fn baseline() -> Self {
        ModelConfig {
            osa: false,
            contrastive: false,
            magn: false,
            dacm: false,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 {
            return Err(CodafError::config("at least one class is required".to_string()));
        }
        if self.image_size % 32 != 0 || self.image_size == 0 {
            return Err(CodafError::config(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        for c in self.channels {
            if c % 4 != 0 {
                return Err(CodafError::config(format!(
                    "channel width {c} must allow the 4x attention bottleneck"
                )));
            }
        }
        if !(self.tau > 0.0) {
            return Err(CodafError::config(format!("temperature {} must be positive", self.tau)));
        }
        if !(self.lambda >= 0.0) {
            return Err(CodafError::config(format!(
                "alignment weight {} must be non-negative",
                self.lambda
            )));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(CodafError::config(format!(
                "suppression threshold {} must sit in (0, 1)",
                self.nms_iou
            )));
        }
        Ok(())
    }

    /// Spatial extent of scale `s` maps.
    pub fn grid(&self, s: usize) -> usize {
        self.image_size / STRIDES[s]
    }

    fn osa_cfg(&self, s: usize) -> OsaConfig {
        OsaConfig {
            channels: self.channels[s],
            kernel: 3,
            attention_from_visible: self.attention_from_visible,
            residual_read_at_center: self.residual_read_at_center,
        }
    }

    fn dafm_cfg(&self, s: usize) -> DafmConfig {
        DafmConfig { channels: self.channels[s], mlp_ratio: 4, magn: self.magn, dacm: self.dacm }
    }

    fn stage_aligns(&self, s: usize) -> bool {
        self.osa && self.active_stages[s]
    }
}

/// Backbone stage widths from image to the stride-8 scale.
fn stem_widths(cfg: &ModelConfig) -> [usize; 2] {
    [cfg.channels[0] / 2, (cfg.channels[0] * 3) / 4]
}

/// Register every parameter the configured model will touch.
pub fn register_model_params<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    cfg: &ModelConfig,
) -> Result<()> {
    cfg.validate()?;
    let [w1, w2] = stem_widths(cfg);
    for stream in ["vis", "ir"] {
        let widths = [(3, w1), (w1, w2), (w2, cfg.channels[0]), (cfg.channels[0], cfg.channels[1]), (cfg.channels[1], cfg.channels[2])];
        for (i, (cin, cout)) in widths.into_iter().enumerate() {
            store.insert(&format!("{stream}.c{i}.w"), he_conv(rng, cout, cin, 3))?;
            store.insert(&format!("{stream}.c{i}.b"), zeros(&[cout]))?;
        }
    }
    for s in 0..NUM_SCALES {
        let prefix = format!("s{s}");
        if cfg.stage_aligns(s) {
            register_osa_params(store, rng, &format!("{prefix}.osa"), &cfg.osa_cfg(s))?;
            if cfg.contrastive {
                register_embed_params(
                    store,
                    rng,
                    &format!("{prefix}.embed"),
                    cfg.channels[s],
                    cfg.embed_dim,
                )?;
            }
        }
        register_dafm_params(store, rng, &format!("{prefix}.dafm"), &cfg.dafm_cfg(s))?;
        store.insert(
            &format!("neck.lat{s}.w"),
            he_conv(rng, cfg.neck_channels, cfg.channels[s], 1),
        )?;
        store.insert(&format!("neck.lat{s}.b"), zeros(&[cfg.neck_channels]))?;
    }
    store.insert("head.trunk.w", he_conv(rng, cfg.head_channels, cfg.neck_channels, 3))?;
    store.insert("head.trunk.b", zeros(&[cfg.head_channels]))?;
    store.insert("head.cls.w", he_conv(rng, cfg.classes, cfg.head_channels, 1))?;
    // Start classification near the negative prior so early training is
    // not swamped by background gradients.
    let prior = -(99.0f64).ln();
    store.insert(
        "head.cls.b",
        ArrayD::from_elem(IxDyn(&[cfg.classes]), F::from_f64(prior)),
    )?;
    store.insert("head.reg.w", he_conv(rng, 4, cfg.head_channels, 1))?;
    store.insert("head.reg.b", zeros(&[4]))?;
    Ok(())
}

/// One modality's pyramid: features at strides 8, 16 and 32.
fn backbone_stream<F: Scalar>(
    g: &mut Graph<'_, F>,
    stream: &str,
    x: Var,
) -> Result<[Var; NUM_SCALES]> {
    let mut cur = x;
    let mut feats = Vec::with_capacity(NUM_SCALES);
    for i in 0..5 {
        let w = g.p(&format!("{stream}.c{i}.w"))?;
        let b = g.p(&format!("{stream}.c{i}.b"))?;
        let y = g.tape.conv2d(cur, w, b, 1, 2);
        cur = g.tape.relu(y);
        if i >= 2 {
            feats.push(cur);
        }
    }
    Ok([feats[0], feats[1], feats[2]])
}

/// Alignment products one scale feeds into the loss. Embeddings exist
/// only when the contrastive branch is enabled.
#[derive(Clone, Copy)]
pub struct AlignScale {
    pub aligned: Var,
    pub ir: Var,
    pub attention: Var,
    pub base: Var,
    pub v_emb: Option<Var>,
    pub i_emb: Option<Var>,
}

/// Per-scale head outputs.
#[derive(Clone, Copy)]
pub struct ScaleMaps {
    pub cls: Var,
    pub reg: Var,
}

/// Full forward products: head maps per scale plus whatever the
/// alignment branch produced.
pub struct ForwardOutputs {
    pub scales: Vec<ScaleMaps>,
    pub align: Vec<Option<AlignScale>>,
}

/// Run the detector over one batch of image pairs [B, 3, S, S] (visible)
/// and [B, 1, S, S] (infrared).
pub fn model_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    rgb: Var,
    ir: Var,
) -> Result<ForwardOutputs> {
    let rs = g.tape.value(rgb).shape().to_vec();
    let is = g.tape.value(ir).shape().to_vec();
    if rs.len() != 4 || is.len() != 4 || rs[1] != 3 || is[1] != 1 {
        return Err(CodafError::shape(format!(
            "expected visible [B,3,S,S] and infrared [B,1,S,S], got {rs:?} and {is:?}"
        )));
    }
    if rs[0] != is[0] || rs[2] != cfg.image_size || is[2] != cfg.image_size {
        return Err(CodafError::shape(format!(
            "image pair mismatch: visible {rs:?}, infrared {is:?}, configured size {}",
            cfg.image_size
        )));
    }
    // The infrared stream convolves a 3-channel stack too, so both stems
    // share one shape; the single channel is simply repeated.
    let ir3 = {
        let a = g.tape.concat_c(ir, ir);
        g.tape.concat_c(a, ir)
    };
    let vis_feats = backbone_stream(g, "vis", rgb)?;
    let ir_feats = backbone_stream(g, "ir", ir3)?;

    let mut fused = Vec::with_capacity(NUM_SCALES);
    let mut align = Vec::with_capacity(NUM_SCALES);
    for s in 0..NUM_SCALES {
        let prefix = format!("s{s}");
        let (va, scale_align) = if cfg.stage_aligns(s) {
            let osa =
                osa_forward(g, &format!("{prefix}.osa"), vis_feats[s], ir_feats[s], &cfg.osa_cfg(s))?;
            let (v_emb, i_emb) = if cfg.contrastive {
                let v = sid_embed(g, &format!("{prefix}.embed"), osa.aligned)?;
                let i = sid_embed(g, &format!("{prefix}.embed"), ir_feats[s])?;
                (Some(v), Some(i))
            } else {
                (None, None)
            };
            (
                osa.aligned,
                Some(AlignScale {
                    aligned: osa.aligned,
                    ir: ir_feats[s],
                    attention: osa.attention,
                    base: osa.base,
                    v_emb,
                    i_emb,
                }),
            )
        } else {
            (vis_feats[s], None)
        };
        let out = dafm_forward(g, &format!("{prefix}.dafm"), va, ir_feats[s], &cfg.dafm_cfg(s))?;
        fused.push(out.fused);
        align.push(scale_align);
    }

    // Top-down merge: shared-width laterals, nearest upsampling, addition.
    let mut laterals = Vec::with_capacity(NUM_SCALES);
    for (s, &f) in fused.iter().enumerate() {
        let w = g.p(&format!("neck.lat{s}.w"))?;
        let b = g.p(&format!("neck.lat{s}.b"))?;
        laterals.push(g.tape.conv2d(f, w, b, 0, 1));
    }
    let p5 = laterals[2];
    let up5 = g.tape.upsample_nearest2(p5);
    let p4 = g.tape.add(laterals[1], up5);
    let up4 = g.tape.upsample_nearest2(p4);
    let p3 = g.tape.add(laterals[0], up4);

    let mut scales = Vec::with_capacity(NUM_SCALES);
    for p in [p3, p4, p5] {
        let tw = g.p("head.trunk.w")?;
        let tb = g.p("head.trunk.b")?;
        let t = g.tape.conv2d(p, tw, tb, 1, 1);
        let t = g.tape.relu(t);
        let cw = g.p("head.cls.w")?;
        let cb = g.p("head.cls.b")?;
        let cls = g.tape.conv2d(t, cw, cb, 0, 1);
        let rw = g.p("head.reg.w")?;
        let rb = g.p("head.reg.b")?;
        let reg = g.tape.conv2d(t, rw, rb, 0, 1);
        scales.push(ScaleMaps { cls, reg });
    }
    Ok(ForwardOutputs { scales, align })
}

/// One annotated object in the infrared frame, corner-form pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBox {
    pub class_id: usize,
    pub bbox: [f64; 4],
}

/// A head cell matched to an object.
#[derive(Debug, Clone, PartialEq)]
struct PositiveCell {
    batch: usize,
    row: usize,
    col: usize,
    class_id: usize,
    /// Distances to the four box edges, pixels.
    ltrb: [f64; 4],
    area: f64,
}

/// Centre-sampling assignment of objects to head cells, per scale.
fn build_targets(
    cfg: &ModelConfig,
    batch: &[Vec<TargetBox>],
) -> Result<Vec<Vec<PositiveCell>>> {
    let mut per_scale: Vec<Vec<PositiveCell>> = vec![Vec::new(); NUM_SCALES];
    for (b, boxes) in batch.iter().enumerate() {
        for t in boxes {
            let [x0, y0, x1, y1] = t.bbox;
            if !(x1 > x0 && y1 > y0) {
                return Err(CodafError::data(format!(
                    "degenerate box {:?} in image {b}",
                    t.bbox
                )));
            }
            if t.class_id >= cfg.classes {
                return Err(CodafError::data(format!(
                    "class {} outside the {}-class head",
                    t.class_id, cfg.classes
                )));
            }
            let side = (x1 - x0).max(y1 - y0);
            let s = if side <= SIZE_RANGES[0] {
                0
            } else if side <= SIZE_RANGES[1] {
                1
            } else {
                2
            };
            let stride = STRIDES[s] as f64;
            let grid = cfg.grid(s);
            let (cx, cy) = ((x0 + x1) / 2.0, (y0 + y1) / 2.0);
            let radius = CENTER_RADIUS * stride;
            let area = (x1 - x0) * (y1 - y0);
            for i in 0..grid {
                for j in 0..grid {
                    let (px, py) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                    let near = (px - cx).abs() <= radius && (py - cy).abs() <= radius;
                    let inside = px > x0 && px < x1 && py > y0 && py < y1;
                    if !(near && inside) {
                        continue;
                    }
                    let cell = PositiveCell {
                        batch: b,
                        row: i,
                        col: j,
                        class_id: t.class_id,
                        ltrb: [px - x0, py - y0, x1 - px, y1 - py],
                        area,
                    };
                    // A contested cell belongs to the smallest object.
                    if let Some(prev) = per_scale[s]
                        .iter_mut()
                        .find(|p| p.batch == b && p.row == i && p.col == j)
                    {
                        if area < prev.area {
                            *prev = cell;
                        }
                    } else {
                        per_scale[s].push(cell);
                    }
                }
            }
        }
    }
    Ok(per_scale)
}

/// Tape-level detection loss: binary cross-entropy over matched cells
/// plus sampled negatives, and an overlap loss over matched boxes.
fn detection_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    fwd: &ForwardOutputs,
    batch: &[Vec<TargetBox>],
    batch_size: usize,
    neg_rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let per_scale = build_targets(cfg, batch)?;
    let mut cls_terms: Vec<Var> = Vec::new();
    let mut iou_terms: Vec<Var> = Vec::new();

    for (s, cells) in per_scale.iter().enumerate() {
        let grid = cfg.grid(s);
        let taken: std::collections::BTreeSet<(usize, usize, usize)> =
            cells.iter().map(|c| (c.batch, c.row, c.col)).collect();
        let n_neg = (cells.len() * NEG_PER_POS).max(MIN_NEG_CELLS);
        let mut negs = Vec::with_capacity(n_neg);
        let mut guard = 0;
        while negs.len() < n_neg && guard < n_neg * 50 {
            guard += 1;
            let b = neg_rng.random_range(0..batch_size);
            let i = neg_rng.random_range(0..grid);
            let j = neg_rng.random_range(0..grid);
            if !taken.contains(&(b, i, j)) {
                negs.push((b, i, j));
            }
        }

        let mut gather: Vec<(usize, usize, usize)> =
            cells.iter().map(|c| (c.batch, c.row, c.col)).collect();
        gather.extend(negs.iter().copied());
        if gather.is_empty() {
            continue;
        }
        let mut targets = ArrayD::<F>::zeros(IxDyn(&[gather.len(), cfg.classes]));
        for (p, c) in cells.iter().enumerate() {
            targets[IxDyn(&[p, c.class_id])] = F::one();
        }
        let picked = g.tape.gather_cells(fwd.scales[s].cls, gather);
        let tgt = g.tape.constant(targets);
        cls_terms.push(g.tape.bce_with_logits_mean(picked, tgt));

        if cells.is_empty() {
            continue;
        }
        let pos: Vec<(usize, usize, usize)> =
            cells.iter().map(|c| (c.batch, c.row, c.col)).collect();
        let n_pos = pos.len();
        let raw = g.tape.gather_cells(fwd.scales[s].reg, pos);
        let sp = g.tape.softplus(raw);
        let dist = g.tape.scale(sp, F::from_f64(STRIDES[s] as f64));
        let pred = g.tape.reshape(dist, &[n_pos, 4, 1, 1]);
        let mut tball = ArrayD::<F>::zeros(IxDyn(&[n_pos, 4, 1, 1]));
        for (p, c) in cells.iter().enumerate() {
            for k in 0..4 {
                tball[IxDyn(&[p, k, 0, 0])] = F::from_f64(c.ltrb[k]);
            }
        }
        let tgtb = g.tape.constant(tball);
        iou_terms.push(overlap_loss(g.tape, pred, tgtb));
    }

    let cls = match cls_terms.len() {
        0 => g.tape.constant(ArrayD::zeros(IxDyn(&[]))),
        1 => cls_terms[0],
        _ => g.tape.mean_of(&cls_terms),
    };
    let iou = match iou_terms.len() {
        0 => g.tape.constant(ArrayD::zeros(IxDyn(&[]))),
        1 => iou_terms[0],
        _ => g.tape.mean_of(&iou_terms),
    };
    Ok(g.tape.add(cls, iou))
}

/// Mean (1 - IoU) between predicted and target edge distances [P,4,1,1]
/// sharing their centre cell.
fn overlap_loss<F: Scalar>(tape: &mut Tape<F>, pred: Var, tgt: Var) -> Var {
    let col = |tape: &mut Tape<F>, v: Var, k: usize| tape.slice_c(v, k, k + 1);
    let (lp, tp_, rp, bp) =
        (col(tape, pred, 0), col(tape, pred, 1), col(tape, pred, 2), col(tape, pred, 3));
    let (lt, tt, rt, bt) =
        (col(tape, tgt, 0), col(tape, tgt, 1), col(tape, tgt, 2), col(tape, tgt, 3));
    let iw = {
        let a = tape.min_elem(lp, lt);
        let b = tape.min_elem(rp, rt);
        tape.add(a, b)
    };
    let ih = {
        let a = tape.min_elem(tp_, tt);
        let b = tape.min_elem(bp, bt);
        tape.add(a, b)
    };
    let inter = tape.mul(iw, ih);
    let area_p = {
        let w = tape.add(lp, rp);
        let h = tape.add(tp_, bp);
        tape.mul(w, h)
    };
    let area_t = {
        let w = tape.add(lt, rt);
        let h = tape.add(tt, bt);
        tape.mul(w, h)
    };
    let union = {
        let s = tape.add(area_p, area_t);
        let d = tape.sub(s, inter);
        tape.add_scalar(d, F::from_f64(1e-9))
    };
    let iou = tape.div(inter, union);
    let mean = tape.mean_all(iou);
    let neg = tape.neg(mean);
    tape.add_scalar(neg, F::one())
}

/// Everything one optimisation step needs from the loss assembly.
pub struct StepLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Compose detection and alignment losses for one forward pass. The
/// negative-sampling generator must be seeded per step for reproducible
/// trajectories.
pub fn model_loss<F: Scalar>(
    g: &mut Graph<'_, F>,
    cfg: &ModelConfig,
    fwd: &ForwardOutputs,
    batch: &[Vec<TargetBox>],
    neg_seed: u64,
) -> Result<StepLoss> {
    let batch_size = g.tape.value(fwd.scales[0].cls).shape()[0];
    if batch.len() != batch_size {
        return Err(CodafError::data(format!(
            "{} annotation lists for a batch of {batch_size}",
            batch.len()
        )));
    }
    let mut neg_rng = ChaCha8Rng::seed_from_u64(neg_seed);
    let det = detection_loss(g, cfg, fwd, batch, batch_size, &mut neg_rng)?;

    let mut scale_losses: Vec<AlignmentTerms> = Vec::new();
    for a in fwd.align.iter().flatten() {
        let scale = match (a.v_emb, a.i_emb) {
            (Some(v), Some(i)) => alignment_scale(
                g.tape,
                v,
                i,
                a.aligned,
                a.ir,
                a.attention,
                cfg.tau,
                cfg.ssim_window,
            ),
            // Contrastive branch disabled: its term is identically zero
            // and the composition identities still hold.
            _ => {
                let contrast = g.tape.constant(ArrayD::zeros(IxDyn(&[])));
                let ssim = g.tape.ssim_loss(a.aligned, a.ir, cfg.ssim_window);
                let mae = g.tape.mae_loss(a.aligned, a.ir);
                let sparse = g.tape.sparsity_loss(a.attention);
                let smooth = g.tape.smoothness_loss(a.attention);
                compose_terms(g.tape, contrast, ssim, mae, sparse, smooth)
            }
        };
        scale_losses.push(scale);
    }
    if scale_losses.is_empty() {
        let total = det;
        let breakdown =
            LossBreakdown::detection_only(g.tape.scalar(det), g.tape.scalar(total));
        return Ok(StepLoss { total, breakdown });
    }
    let align: AlignmentTerms = alignment_total(g.tape, &scale_losses);
    let total = total_loss(g.tape, det, align.total, cfg.lambda);
    let breakdown = LossBreakdown::from_tape(g.tape, det, &align, total);
    Ok(StepLoss { total, breakdown })
}

/// Greedy per-class suppression of overlapping boxes, keeping at most
/// `keep_per_image` survivors per image.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64, keep_per_image: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.image_id.cmp(&b.image_id))
    });
    let mut kept: Vec<Detection> = Vec::new();
    let mut per_image: std::collections::BTreeMap<usize, usize> = std::collections::BTreeMap::new();
    for d in dets {
        let count = per_image.entry(d.image_id).or_insert(0);
        if *count >= keep_per_image {
            continue;
        }
        let clash = kept.iter().any(|k| {
            k.image_id == d.image_id
                && k.class_id == d.class_id
                && crate::eval::iou(&k.bbox, &d.bbox) > iou_thresh
        });
        if !clash {
            kept.push(d);
            *count += 1;
        }
    }
    kept
}

/// Turn head maps into scored corner-form detections for each image in
/// the batch. `image_ids` maps batch rows to dataset identities.
pub fn decode_detections<F: Scalar>(
    tape: &Tape<F>,
    cfg: &ModelConfig,
    fwd: &ForwardOutputs,
    image_ids: &[usize],
) -> Result<Vec<Detection>> {
    let batch = tape.value(fwd.scales[0].cls).shape()[0];
    if image_ids.len() != batch {
        return Err(CodafError::data(format!(
            "{} image ids for a batch of {batch}",
            image_ids.len()
        )));
    }
    let size = cfg.image_size as f64;
    let mut all = Vec::new();
    for s in 0..NUM_SCALES {
        let cls = tape.value(fwd.scales[s].cls);
        let reg = tape.value(fwd.scales[s].reg);
        let grid = cfg.grid(s);
        let stride = STRIDES[s] as f64;
        for b in 0..batch {
            for i in 0..grid {
                for j in 0..grid {
                    let (px, py) = ((j as f64 + 0.5) * stride, (i as f64 + 0.5) * stride);
                    for c in 0..cfg.classes {
                        let logit = cls[IxDyn(&[b, c, i, j])].as_f64();
                        let score = 1.0 / (1.0 + (-logit).exp());
                        if score <= cfg.score_thresh {
                            continue;
                        }
                        let d = |k: usize| {
                            let r = reg[IxDyn(&[b, k, i, j])].as_f64();
                            // softplus, matching the training-time decode
                            let sp = if r > 20.0 { r } else { (1.0 + r.exp()).ln() };
                            sp * stride
                        };
                        let bbox = [
                            (px - d(0)).clamp(0.0, size),
                            (py - d(1)).clamp(0.0, size),
                            (px + d(2)).clamp(0.0, size),
                            (py + d(3)).clamp(0.0, size),
                        ];
                        if bbox[2] - bbox[0] < 1e-6 || bbox[3] - bbox[1] < 1e-6 {
                            continue;
                        }
                        all.push(Detection {
                            image_id: image_ids[b],
                            class_id: c,
                            bbox,
                            score,
                        });
                    }
                }
            }
        }
    }
    Ok(nms(all, cfg.nms_iou, 100))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Binder;
    use crate::tensor::rand_uniform;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_size: 64,
            channels: [8, 12, 16],
            embed_dim: 8,
            neck_channels: 8,
            head_channels: 8,
            ..ModelConfig::default()
        }
    }

    fn forward_once(
        cfg: &ModelConfig,
        seed: u64,
    ) -> (Tape<f64>, Binder, ParamStore<f64>, ForwardOutputs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_model_params(&mut store, &mut rng, cfg).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let rgb = tape.leaf(rand_uniform(&mut rng, &[2, 3, 64, 64], 0.0, 1.0), false);
        let ir = tape.leaf(rand_uniform(&mut rng, &[2, 1, 64, 64], 0.0, 1.0), false);
        let fwd = {
            let mut g = Graph::new(&mut tape, &mut binder, &store);
            model_forward(&mut g, cfg, rgb, ir).unwrap()
        };
        (tape, binder, store, fwd)
    }

    #[test]
    fn head_maps_share_shapes_across_ablation_modes() {
        let full = tiny_cfg();
        let baseline = ModelConfig {
            osa: false,
            contrastive: false,
            magn: false,
            dacm: false,
            ..tiny_cfg()
        };
        let (t1, _, _, f1) = forward_once(&full, 70);
        let (t2, _, _, f2) = forward_once(&baseline, 70);
        for s in 0..NUM_SCALES {
            assert_eq!(
                t1.value(f1.scales[s].cls).shape(),
                t2.value(f2.scales[s].cls).shape(),
                "ablations must not change the head contract at scale {s}"
            );
            assert_eq!(
                t1.value(f1.scales[s].reg).shape(),
                t2.value(f2.scales[s].reg).shape()
            );
        }
        assert!(f1.align.iter().all(|a| a.is_some()), "full model aligns every scale");
        assert!(f2.align.iter().all(|a| a.is_none()), "baseline aligns nothing");
    }

    #[test]
    fn head_map_shapes_follow_the_strides() {
        let cfg = tiny_cfg();
        let (tape, _, _, fwd) = forward_once(&cfg, 71);
        for s in 0..NUM_SCALES {
            let g = cfg.grid(s);
            assert_eq!(
                tape.value(fwd.scales[s].cls).shape(),
                &[2, cfg.classes, g, g],
                "classification map at stride {}",
                STRIDES[s]
            );
            assert_eq!(tape.value(fwd.scales[s].reg).shape(), &[2, 4, g, g]);
        }
    }

    #[test]
    fn default_model_stays_inside_the_weight_budget() {
        let cfg = ModelConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_model_params(&mut store, &mut rng, &cfg).unwrap();
        let n = store.param_count();
        assert!(n <= 2_000_000, "default model has {n} weights, budget is 2M");
        assert!(n >= 100_000, "suspiciously small model: {n} weights");
    }

    #[test]
    fn centre_sampling_assigns_small_boxes_to_the_fine_scale() {
        let cfg = ModelConfig::default();
        let batch = vec![vec![
            TargetBox { class_id: 0, bbox: [40.0, 40.0, 60.0, 60.0] },
            TargetBox { class_id: 1, bbox: [10.0, 66.0, 70.0, 102.0] },
            TargetBox { class_id: 2, bbox: [20.0, 20.0, 110.0, 120.0] },
        ]];
        let per_scale = build_targets(&cfg, &batch).unwrap();
        assert!(!per_scale[0].is_empty(), "a 20 px box trains the stride-8 head");
        assert!(
            per_scale[0].iter().all(|c| c.class_id == 0),
            "only the small box lands on the fine scale"
        );
        assert!(!per_scale[1].is_empty(), "a 60 px box trains the stride-16 head");
        assert!(
            per_scale[1].iter().all(|c| c.class_id == 1),
            "mid-sized boxes land on the middle scale alone"
        );
        assert!(!per_scale[2].is_empty(), "a 100 px box trains the stride-32 head");
        for c in &per_scale[0] {
            let (px, py) = ((c.col as f64 + 0.5) * 8.0, (c.row as f64 + 0.5) * 8.0);
            assert!(px > 40.0 && px < 60.0 && py > 40.0 && py < 60.0);
            for (k, d) in c.ltrb.iter().enumerate() {
                assert!(*d > 0.0, "edge distance {k} must be positive, got {d}");
            }
            assert!((c.ltrb[0] + c.ltrb[2] - 20.0).abs() < 1e-9, "widths reassemble");
        }
    }

    #[test]
    fn contested_cells_go_to_the_smaller_box() {
        let cfg = ModelConfig::default();
        let batch = vec![vec![
            TargetBox { class_id: 0, bbox: [38.0, 38.0, 62.0, 62.0] },
            TargetBox { class_id: 1, bbox: [44.0, 44.0, 56.0, 56.0] },
        ]];
        let per_scale = build_targets(&cfg, &batch).unwrap();
        let mid = per_scale[0]
            .iter()
            .find(|c| c.row == 6 && c.col == 6)
            .expect("the centre cell (52, 52) is inside both boxes");
        assert_eq!(mid.class_id, 1, "the smaller box claims the contested cell");
    }

    #[test]
    fn malformed_targets_are_rejected() {
        let cfg = ModelConfig::default();
        let flipped = vec![vec![TargetBox { class_id: 0, bbox: [60.0, 40.0, 40.0, 60.0] }]];
        assert!(build_targets(&cfg, &flipped).is_err(), "inverted corners are data errors");
        let class_oob = vec![vec![TargetBox { class_id: 9, bbox: [40.0, 40.0, 60.0, 60.0] }]];
        assert!(build_targets(&cfg, &class_oob).is_err(), "class ids must fit the head");
    }

    #[test]
    fn loss_identities_hold_and_gradients_reach_every_parameter() {
        let cfg = tiny_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_model_params(&mut store, &mut rng, &cfg).unwrap();
        // The second offset conv starts at zero, which blocks gradient
        // into the first; perturb it so reachability is observable.
        for s in 0..NUM_SCALES {
            let name = format!("s{s}.osa.base.w2");
            let shape: Vec<usize> = store.iter().find(|(n, _)| *n == &name).unwrap().1.shape().to_vec();
            store.set(&name, crate::tensor::randn(&mut rng, &shape).mapv(|v: f64| v * 0.01)).unwrap();
        }
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let rgb = tape.leaf(rand_uniform(&mut rng, &[2, 3, 64, 64], 0.0, 1.0), false);
        let ir = tape.leaf(rand_uniform(&mut rng, &[2, 1, 64, 64], 0.0, 1.0), false);
        let batch = vec![
            vec![TargetBox { class_id: 0, bbox: [20.0, 20.0, 40.0, 44.0] }],
            vec![
                TargetBox { class_id: 1, bbox: [8.0, 8.0, 26.0, 25.0] },
                TargetBox { class_id: 2, bbox: [30.0, 34.0, 58.0, 60.0] },
            ],
        ];
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let fwd = model_forward(&mut g, &cfg, rgb, ir).unwrap();
        let step = model_loss(&mut g, &cfg, &fwd, &batch, 99).unwrap();
        step.breakdown.verify(cfg.lambda, 1e-9).unwrap();
        assert!(step.breakdown.total.is_finite());
        assert!(step.breakdown.det > 0.0, "fresh model must pay detection loss");

        let grads = tape.backward(step.total);
        let mut missing = Vec::new();
        for (name, var) in binder.bound() {
            match grads.get(var) {
                None => missing.push(format!("{name} (absent)")),
                Some(gr) if gr.iter().all(|&v| v == 0.0) => {
                    missing.push(format!("{name} (zero)"))
                }
                _ => {}
            }
        }
        assert!(missing.is_empty(), "parameters without gradient: {missing:?}");
        // Every registered parameter should have been touched by the
        // forward pass; a silent skip means dead weights.
        assert_eq!(binder.len(), store.tensor_count(), "every weight joins the graph");
    }

    #[test]
    fn baseline_total_is_pure_detection_loss() {
        let cfg = ModelConfig { osa: false, contrastive: false, magn: false, dacm: false, ..tiny_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(74);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_model_params(&mut store, &mut rng, &cfg).unwrap();
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let rgb = tape.leaf(rand_uniform(&mut rng, &[1, 3, 64, 64], 0.0, 1.0), false);
        let ir = tape.leaf(rand_uniform(&mut rng, &[1, 1, 64, 64], 0.0, 1.0), false);
        let batch = vec![vec![TargetBox { class_id: 0, bbox: [20.0, 20.0, 40.0, 40.0] }]];
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let fwd = model_forward(&mut g, &cfg, rgb, ir).unwrap();
        let step = model_loss(&mut g, &cfg, &fwd, &batch, 7).unwrap();
        assert_eq!(step.breakdown.total, step.breakdown.det);
        assert_eq!(step.breakdown.align_total, 0.0);
        step.breakdown.verify(cfg.lambda, 1e-12).unwrap();
    }

    #[test]
    fn decode_recovers_a_planted_activation() {
        let cfg = tiny_cfg();
        let (mut tape, _, _, fwd) = forward_once(&cfg, 75);
        // Plant a confident activation at scale 0, cell (3, 4), class 1,
        // with distances decoding to a box around the cell centre.
        let mut cls = tape.value(fwd.scales[0].cls).clone();
        cls.fill(-9.0);
        cls[IxDyn(&[0, 1, 3, 4])] = 4.0;
        let mut reg = tape.value(fwd.scales[0].reg).clone();
        reg.fill(-6.0);
        for k in 0..4 {
            reg[IxDyn(&[0, k, 3, 4])] = 1.0;
        }
        let planted = ForwardOutputs {
            scales: vec![
                ScaleMaps {
                    cls: tape.leaf(cls, false),
                    reg: tape.leaf(reg, false),
                },
                ScaleMaps {
                    cls: {
                        let mut m = tape.value(fwd.scales[1].cls).clone();
                        m.fill(-9.0);
                        tape.leaf(m, false)
                    },
                    reg: fwd.scales[1].reg,
                },
                ScaleMaps {
                    cls: {
                        let mut m = tape.value(fwd.scales[2].cls).clone();
                        m.fill(-9.0);
                        tape.leaf(m, false)
                    },
                    reg: fwd.scales[2].reg,
                },
            ],
            align: Vec::new(),
        };
        let dets = decode_detections(&tape, &cfg, &planted, &[10, 11]).unwrap();
        assert_eq!(dets.len(), 1, "one activation above threshold, got {dets:?}");
        let d = &dets[0];
        assert_eq!((d.image_id, d.class_id), (10, 1));
        // Cell centre (36, 28), softplus(1) * 8 = 10.50 on every side.
        let side = (1.0f64.exp() + 1.0).ln() * 8.0;
        let want = [36.0 - side, 28.0 - side, 36.0 + side, 28.0 + side];
        for k in 0..4 {
            assert!(
                (d.bbox[k] - want[k]).abs() < 1e-9,
                "edge {k}: got {}, want {}",
                d.bbox[k],
                want[k]
            );
        }
    }

    #[test]
    fn nms_suppresses_same_class_overlaps_only() {
        let mk = |class_id: usize, x: f64, score: f64| Detection {
            image_id: 0,
            class_id,
            bbox: [x, 0.0, x + 10.0, 10.0],
            score,
        };
        let kept = nms(
            vec![mk(0, 0.0, 0.9), mk(0, 1.0, 0.8), mk(1, 1.0, 0.7), mk(0, 20.0, 0.6)],
            0.5,
            100,
        );
        assert_eq!(kept.len(), 3, "one same-class overlap disappears: {kept:?}");
        assert!(kept.iter().any(|d| d.class_id == 1), "other classes are untouched");
        assert!(
            kept.iter().all(|d| d.class_id != 0 || d.bbox[0] != 1.0),
            "the weaker overlapping box is the one removed"
        );
    }

    #[test]
    fn forward_is_deterministic_for_a_fixed_seed() {
        let cfg = tiny_cfg();
        let (t1, _, _, f1) = forward_once(&cfg, 76);
        let (t2, _, _, f2) = forward_once(&cfg, 76);
        for s in 0..NUM_SCALES {
            assert_eq!(
                t1.value(f1.scales[s].cls),
                t2.value(f2.scales[s].cls),
                "same seed, same maps at scale {s}"
            );
        }
    }
}
