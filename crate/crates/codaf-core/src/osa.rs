//! Offset-guided semantic alignment between the visible and infrared
//! streams.
//!
//! An attention map distilled from the infrared features gates both
//! modalities; the gated pair drives a small head that predicts one base
//! offset per position, and a second head read off the raw visible
//! features refines it with per-tap residuals and modulation weights. A
//! deformable convolution then resamples the visible features so they
//! land on the infrared grid. The heads that move samples start at zero,
//! so an untrained block degrades to half of a plain convolution instead
//! of scrambling the features.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::error::Result;
use crate::params::{he_conv, he_linear, zeros, Graph, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Scalar;

/// Shape and behaviour switches for one alignment block.
#[derive(Debug, Clone, Copy)]
pub struct OsaConfig {
    /// Channel width of both incoming feature maps.
    pub channels: usize,
    /// Deformable kernel extent (odd).
    pub kernel: usize,
    /// Drive the gating attention from the visible stream instead of the
    /// infrared stream.
    pub attention_from_visible: bool,
    /// Read residual offsets at the original position instead of at the
    /// base-shifted position.
    pub residual_read_at_center: bool,
}

impl OsaConfig {
    pub fn new(channels: usize) -> Self {
        OsaConfig {
            channels,
            kernel: 3,
            attention_from_visible: false,
            residual_read_at_center: false,
        }
    }

    pub fn taps(&self) -> usize {
        self.kernel * self.kernel
    }
}

/// Everything downstream consumers need from one aligned scale.
#[derive(Clone, Copy)]
pub struct OsaOutputs {
    /// Visible features resampled onto the infrared grid.
    pub aligned: Var,
    /// Gating attention in [0, 1], one channel.
    pub attention: Var,
    /// Predicted per-position base offset, two channels (y then x).
    pub base: Var,
}

/// Register one alignment block's weights. Offset-producing heads start
/// at zero so the block begins as an identity-shaped resampler.
pub fn register_osa_params<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    prefix: &str,
    cfg: &OsaConfig,
) -> Result<()> {
    let c = cfg.channels;
    let k = cfg.kernel;
    let taps = cfg.taps();
    store.insert(&format!("{prefix}.attn.w"), he_conv(rng, 1, c, 1))?;
    store.insert(&format!("{prefix}.attn.b"), zeros(&[1]))?;
    store.insert(&format!("{prefix}.base.w1"), he_conv(rng, c, 2 * c, k))?;
    store.insert(&format!("{prefix}.base.b1"), zeros(&[c]))?;
    store.insert(&format!("{prefix}.base.w2"), zeros(&[2, c, k, k]))?;
    store.insert(&format!("{prefix}.base.b2"), zeros(&[2]))?;
    store.insert(&format!("{prefix}.res.w"), zeros(&[3 * taps, c, k, k]))?;
    store.insert(&format!("{prefix}.res.b"), zeros(&[3 * taps]))?;
    store.insert(&format!("{prefix}.align.w"), he_conv(rng, c, c, k))?;
    store.insert(&format!("{prefix}.align.b"), zeros(&[c]))?;
    Ok(())
}

/// Register one scale's shared embedding head for the contrastive loss.
pub fn register_embed_params<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    prefix: &str,
    channels: usize,
    embed_dim: usize,
) -> Result<()> {
    store.insert(&format!("{prefix}.w1"), he_linear(rng, embed_dim, channels))?;
    store.insert(&format!("{prefix}.b1"), zeros(&[embed_dim]))?;
    store.insert(&format!("{prefix}.w2"), he_linear(rng, embed_dim, embed_dim))?;
    store.insert(&format!("{prefix}.b2"), zeros(&[embed_dim]))?;
    Ok(())
}

/// Single-channel gating attention in [0, 1] from a 1x1 convolution over
/// the chosen source stream.
pub fn ir_attention_map<F: Scalar>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    vis: Var,
    ir: Var,
    from_visible: bool,
) -> Result<Var> {
    let src = if from_visible { vis } else { ir };
    let w = g.p(&format!("{prefix}.attn.w"))?;
    let b = g.p(&format!("{prefix}.attn.b"))?;
    let logits = g.tape.conv2d(src, w, b, 0, 1);
    Ok(g.tape.sigmoid(logits))
}

/// Gate both streams with the shared attention and stack them, infrared
/// channels first.
pub fn attention_weighted_concat<F: Scalar>(tape: &mut Tape<F>, vis: Var, ir: Var, m: Var) -> Var {
    let gi = tape.mul_bcast(ir, m);
    let gv = tape.mul_bcast(vis, m);
    tape.concat_c(gi, gv)
}

/// Two-layer offset head over the gated stack: one (y, x) base offset per
/// position. The closing layer starts at zero, so offsets do too.
pub fn predict_base_offset<F: Scalar>(g: &mut Graph<'_, F>, prefix: &str, cat: Var) -> Result<Var> {
    let w1 = g.p(&format!("{prefix}.base.w1"))?;
    let b1 = g.p(&format!("{prefix}.base.b1"))?;
    let w2 = g.p(&format!("{prefix}.base.w2"))?;
    let b2 = g.p(&format!("{prefix}.base.b2"))?;
    let h = g.tape.conv2d(cat, w1, b1, 1, 1);
    let h = g.tape.relu(h);
    Ok(g.tape.conv2d(h, w2, b2, 1, 1))
}

/// Absolute coordinate grid [B, 2, H, W]; channel 0 holds row indices,
/// channel 1 column indices.
pub fn coordinate_grid<F: Scalar>(b: usize, h: usize, w: usize) -> ArrayD<F> {
    let mut grid = ArrayD::<F>::zeros(IxDyn(&[b, 2, h, w]));
    for bb in 0..b {
        for i in 0..h {
            for j in 0..w {
                grid[IxDyn(&[bb, 0, i, j])] = F::from_f64(i as f64);
                grid[IxDyn(&[bb, 1, i, j])] = F::from_f64(j as f64);
            }
        }
    }
    grid
}

/// Per-tap residual offsets and modulation weights, predicted from the
/// raw visible features. By default the prediction map is resampled at
/// the base-shifted position, matching where the kernel actually lands.
pub fn residual_and_modulation<F: Scalar>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    vis: Var,
    base: Var,
    taps: usize,
    read_at_center: bool,
) -> Result<(Var, Var)> {
    let w = g.p(&format!("{prefix}.res.w"))?;
    let b = g.p(&format!("{prefix}.res.b"))?;
    let raw = g.tape.conv2d(vis, w, b, 1, 1);
    let read = if read_at_center {
        raw
    } else {
        let s = g.tape.value(base).shape().to_vec();
        let grid = g.tape.constant(coordinate_grid::<F>(s[0], s[2], s[3]));
        let coords = g.tape.add(base, grid);
        g.tape.bilinear_sample(raw, coords)
    };
    let residual = g.tape.slice_c(read, 0, 2 * taps);
    let mlogits = g.tape.slice_c(read, 2 * taps, 3 * taps);
    let modulation = g.tape.sigmoid(mlogits);
    Ok((residual, modulation))
}

/// Resample the visible features through the offset-driven kernel.
pub fn deformable_align<F: Scalar>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    vis: Var,
    base: Var,
    residual: Var,
    modulation: Var,
) -> Result<Var> {
    let w = g.p(&format!("{prefix}.align.w"))?;
    let b = g.p(&format!("{prefix}.align.b"))?;
    Ok(g.tape.deformable_sample(vis, w, b, base, residual, modulation))
}

/// Pool a feature map into a row-normalised embedding [B, D].
pub fn sid_embed<F: Scalar>(g: &mut Graph<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.p(&format!("{prefix}.w1"))?;
    let b1 = g.p(&format!("{prefix}.b1"))?;
    let w2 = g.p(&format!("{prefix}.w2"))?;
    let b2 = g.p(&format!("{prefix}.b2"))?;
    let s = g.tape.value(x).shape().to_vec();
    let pooled = g.tape.global_avg_pool(x);
    let flat = g.tape.reshape(pooled, &[s[0], s[1]]);
    let h = g.tape.linear(flat, w1, b1);
    let h = g.tape.relu(h);
    let e = g.tape.linear(h, w2, b2);
    Ok(g.tape.l2_normalize_rows(e, 1e-12))
}

/// Full alignment block: gate, predict offsets, refine, resample.
pub fn osa_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    vis: Var,
    ir: Var,
    cfg: &OsaConfig,
) -> Result<OsaOutputs> {
    let m = ir_attention_map(g, prefix, vis, ir, cfg.attention_from_visible)?;
    let cat = attention_weighted_concat(g.tape, vis, ir, m);
    let base = predict_base_offset(g, prefix, cat)?;
    let (residual, modulation) =
        residual_and_modulation(g, prefix, vis, base, cfg.taps(), cfg.residual_read_at_center)?;
    let aligned = deformable_align(g, prefix, vis, base, residual, modulation)?;
    Ok(OsaOutputs { aligned, attention: m, base })
}
