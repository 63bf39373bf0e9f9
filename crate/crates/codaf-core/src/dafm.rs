//! Dynamic attention-guided fusion of the aligned visible and infrared
//! features.
//!
//! A gating network looks at both streams and softmax-normalises one
//! weight per modality at every position, so degraded pixels can lean on
//! the other sensor. The fused map is then reweighted twice: a bottleneck
//! MLP over pooled statistics scores each channel, and a small convolution
//! over channel statistics scores each position. With the gate disabled
//! the block falls back to plain addition.

use rand::Rng;

use crate::error::{CodafError, Result};
use crate::params::{he_conv, he_linear, zeros, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Scalar;

/// Shape and behaviour switches for one fusion block.
#[derive(Debug, Clone, Copy)]
pub struct DafmConfig {
    /// Channel width of both incoming streams.
    pub channels: usize,
    /// Bottleneck reduction for the channel-attention MLP.
    pub mlp_ratio: usize,
    /// Per-position modality gating; off means plain addition.
    pub magn: bool,
    /// Channel and spatial reweighting after the merge.
    pub dacm: bool,
}

impl DafmConfig {
    pub fn new(channels: usize) -> Self {
        DafmConfig { channels, mlp_ratio: 4, magn: true, dacm: true }
    }

    fn hidden(&self) -> Result<usize> {
        if self.mlp_ratio == 0 || self.channels % self.mlp_ratio != 0 {
            return Err(CodafError::config(format!(
                "channel attention needs channels ({}) divisible by ratio ({})",
                self.channels, self.mlp_ratio
            )));
        }
        Ok(self.channels / self.mlp_ratio)
    }
}

/// Fusion result plus the intermediate attention maps for inspection.
#[derive(Clone, Copy)]
pub struct DafmOutputs {
    pub fused: Var,
    /// Modality weights [B, 2, H, W]; channel 0 scales visible, channel 1
    /// infrared. Absent when the gate is disabled.
    pub gate: Option<Var>,
    /// Per-channel weights [B, C] in [0, 1]. Absent when reweighting is
    /// disabled.
    pub channel_attention: Option<Var>,
    /// Per-position weights [B, 1, H, W] in [0, 1]. Absent when
    /// reweighting is disabled.
    pub spatial_attention: Option<Var>,
}

/// Register one fusion block's weights. Only the configured sub-blocks
/// get parameters, so ablated branches stay out of the store.
pub fn register_dafm_params<F: Scalar, R: Rng>(
    store: &mut ParamStore<F>,
    rng: &mut R,
    prefix: &str,
    cfg: &DafmConfig,
) -> Result<()> {
    let c = cfg.channels;
    if cfg.magn {
        store.insert(&format!("{prefix}.gate.w1"), he_conv(rng, c, 2 * c, 3))?;
        store.insert(&format!("{prefix}.gate.b1"), zeros(&[c]))?;
        store.insert(&format!("{prefix}.gate.w2"), he_conv(rng, 2, c, 3))?;
        store.insert(&format!("{prefix}.gate.b2"), zeros(&[2]))?;
    }
    if cfg.dacm {
        let h = cfg.hidden()?;
        store.insert(&format!("{prefix}.ca.w1"), he_linear(rng, h, c))?;
        store.insert(&format!("{prefix}.ca.b1"), zeros(&[h]))?;
        store.insert(&format!("{prefix}.ca.w2"), he_linear(rng, c, h))?;
        store.insert(&format!("{prefix}.ca.b2"), zeros(&[c]))?;
        store.insert(&format!("{prefix}.sa.w"), he_conv(rng, 1, 2, 3))?;
        store.insert(&format!("{prefix}.sa.b"), zeros(&[1]))?;
    }
    Ok(())
}

/// Softmax-normalised per-position modality weights from the stacked
/// streams, visible channels first.
pub fn modality_gate<F: Scalar>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    va: Var,
    ia: Var,
) -> Result<Var> {
    let w1 = g.p(&format!("{prefix}.gate.w1"))?;
    let b1 = g.p(&format!("{prefix}.gate.b1"))?;
    let w2 = g.p(&format!("{prefix}.gate.w2"))?;
    let b2 = g.p(&format!("{prefix}.gate.b2"))?;
    let cat = g.tape.concat_c(va, ia);
    let h = g.tape.conv2d(cat, w1, b1, 1, 1);
    let h = g.tape.relu(h);
    let logits = g.tape.conv2d(h, w2, b2, 1, 1);
    Ok(g.tape.softmax_c(logits))
}

/// Blend the two streams with the gate's modality weights.
pub fn gated_fuse<F: Scalar>(g: &mut Graph<'_, F>, va: Var, ia: Var, gate: Var) -> Var {
    let wv = g.tape.slice_c(gate, 0, 1);
    let wi = g.tape.slice_c(gate, 1, 2);
    let v = g.tape.mul_bcast(va, wv);
    let i = g.tape.mul_bcast(ia, wi);
    g.tape.add(v, i)
}

/// Per-channel weights from pooled statistics: average and maximum pools
/// are summed, squeezed through a bottleneck MLP and squashed.
pub fn channel_attention<F: Scalar>(g: &mut Graph<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w1 = g.p(&format!("{prefix}.ca.w1"))?;
    let b1 = g.p(&format!("{prefix}.ca.b1"))?;
    let w2 = g.p(&format!("{prefix}.ca.w2"))?;
    let b2 = g.p(&format!("{prefix}.ca.b2"))?;
    let s = g.tape.value(x).shape().to_vec();
    let avg = g.tape.global_avg_pool(x);
    let mx = g.tape.global_max_pool(x);
    let sum = g.tape.add(avg, mx);
    let flat = g.tape.reshape(sum, &[s[0], s[1]]);
    let h = g.tape.linear(flat, w1, b1);
    let h = g.tape.relu(h);
    let a = g.tape.linear(h, w2, b2);
    Ok(g.tape.sigmoid(a))
}

/// Per-position weights from the channel mean and maximum.
pub fn spatial_attention<F: Scalar>(g: &mut Graph<'_, F>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.p(&format!("{prefix}.sa.w"))?;
    let b = g.p(&format!("{prefix}.sa.b"))?;
    let cm = g.tape.channel_mean(x);
    let cx = g.tape.channel_max(x);
    let cat = g.tape.concat_c(cm, cx);
    let logits = g.tape.conv2d(cat, w, b, 1, 1);
    Ok(g.tape.sigmoid(logits))
}

/// Full fusion block: gate (or add), then channel and spatial
/// reweighting.
pub fn dafm_forward<F: Scalar>(
    g: &mut Graph<'_, F>,
    prefix: &str,
    va: Var,
    ia: Var,
    cfg: &DafmConfig,
) -> Result<DafmOutputs> {
    let (merged, gate) = if cfg.magn {
        let gate = modality_gate(g, prefix, va, ia)?;
        (gated_fuse(g, va, ia, gate), Some(gate))
    } else {
        (g.tape.add(va, ia), None)
    };
    if !cfg.dacm {
        return Ok(DafmOutputs {
            fused: merged,
            gate,
            channel_attention: None,
            spatial_attention: None,
        });
    }
    let ca = channel_attention(g, prefix, merged)?;
    let s = g.tape.value(merged).shape().to_vec();
    let ca4 = g.tape.reshape(ca, &[s[0], s[1], 1, 1]);
    let cw = g.tape.mul_bcast(merged, ca4);
    let sa = spatial_attention(g, prefix, cw)?;
    let fused = g.tape.mul_bcast(cw, sa);
    Ok(DafmOutputs { fused, gate, channel_attention: Some(ca), spatial_attention: Some(sa) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Binder;
    use crate::tape::Tape;
    use crate::tensor::randn;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn registered(seed: u64, cfg: &DafmConfig) -> (ParamStore<f64>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store: ParamStore<f64> = ParamStore::new();
        register_dafm_params(&mut store, &mut rng, "s3.dafm", cfg).unwrap();
        (store, rng)
    }

    #[test]
    fn zeroed_block_divides_the_sum_by_eight() {
        // Zero gate gives a half/half blend; zero channel and spatial
        // attentions each contribute another halving.
        let cfg = DafmConfig::new(4);
        let (mut store, mut rng) = registered(60, &cfg);
        for name in store.names() {
            let shape = store.get(&name).unwrap().shape().to_vec();
            store.set(&name, ArrayD::zeros(IxDyn(&shape))).unwrap();
        }
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let vav: ArrayD<f64> = randn(&mut rng, &[2, 4, 5, 5]);
        let iav: ArrayD<f64> = randn(&mut rng, &[2, 4, 5, 5]);
        let va = tape.leaf(vav.clone(), false);
        let ia = tape.leaf(iav.clone(), false);
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let out = dafm_forward(&mut g, "s3.dafm", va, ia, &cfg).unwrap();
        let fused = tape.value(out.fused);
        let gap = fused
            .iter()
            .zip(vav.iter().zip(iav.iter()))
            .map(|(f, (v, i))| (f - (v + i) / 8.0).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-12, "all-zero fusion must be (va + ia) / 8, gap {gap}");
    }

    #[test]
    fn disabled_gate_falls_back_to_addition() {
        let cfg = DafmConfig { magn: false, dacm: false, ..DafmConfig::new(4) };
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        register_dafm_params(&mut store, &mut rng, "s3.dafm", &cfg).unwrap();
        assert_eq!(store.tensor_count(), 0, "no sub-block, no parameters");
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let vav: ArrayD<f64> = randn(&mut rng, &[1, 4, 3, 3]);
        let iav: ArrayD<f64> = randn(&mut rng, &[1, 4, 3, 3]);
        let va = tape.leaf(vav.clone(), false);
        let ia = tape.leaf(iav.clone(), false);
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let out = dafm_forward(&mut g, "s3.dafm", va, ia, &cfg).unwrap();
        assert!(out.gate.is_none() && out.channel_attention.is_none());
        let fused = tape.value(out.fused);
        let gap = fused
            .iter()
            .zip(vav.iter().zip(iav.iter()))
            .map(|(f, (v, i))| (f - (v + i)).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-12, "gate off must mean plain addition, gap {gap}");
    }

    #[test]
    fn gate_weights_are_a_distribution_over_modalities() {
        let cfg = DafmConfig::new(4);
        let (store, mut rng) = registered(62, &cfg);
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let va = tape.leaf(randn(&mut rng, &[2, 4, 4, 4]), false);
        let ia = tape.leaf(randn(&mut rng, &[2, 4, 4, 4]), false);
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let out = dafm_forward(&mut g, "s3.dafm", va, ia, &cfg).unwrap();
        let gate = tape.value(out.gate.unwrap());
        assert_eq!(gate.shape(), &[2, 2, 4, 4]);
        for b in 0..2 {
            for i in 0..4 {
                for j in 0..4 {
                    let s = gate[IxDyn(&[b, 0, i, j])] + gate[IxDyn(&[b, 1, i, j])];
                    assert!((s - 1.0).abs() < 1e-12, "modality weights sum to one, got {s}");
                }
            }
        }
    }

    #[test]
    fn gate_input_stacks_visible_before_infrared() {
        // A probe kernel that copies stacked channel 0 into the hidden
        // layer and through to the first logit. With constant inputs the
        // gate value then reveals which modality sits first.
        let cfg = DafmConfig { dacm: false, ..DafmConfig::new(2) };
        let (mut store, _) = registered(63, &cfg);
        let mut w1 = ArrayD::<f64>::zeros(IxDyn(&[2, 4, 3, 3]));
        w1[IxDyn(&[0, 0, 1, 1])] = 1.0;
        let mut w2 = ArrayD::<f64>::zeros(IxDyn(&[2, 2, 3, 3]));
        w2[IxDyn(&[0, 0, 1, 1])] = 1.0;
        store.set("s3.dafm.gate.w1", w1).unwrap();
        store.set("s3.dafm.gate.w2", w2).unwrap();

        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let va = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 3.0), false);
        let ia = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 3, 3]), 7.0), false);
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let out = dafm_forward(&mut g, "s3.dafm", va, ia, &cfg).unwrap();
        let gate = tape.value(out.gate.unwrap());
        // Both probe taps read the centre pixel, so logit 0 carries
        // relu(stacked channel 0) = 3.0 against 0 for logit 1.
        let got = gate[IxDyn(&[0, 0, 1, 1])];
        let want = (3.0f64).exp() / ((3.0f64).exp() + 1.0);
        assert!(
            (got - want).abs() < 1e-12,
            "probe read {got}; visible-first stacking implies {want}"
        );
    }

    #[test]
    fn attention_maps_live_in_the_unit_interval() {
        let cfg = DafmConfig::new(8);
        let (store, mut rng) = registered(64, &cfg);
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let va = tape.leaf(randn(&mut rng, &[2, 8, 6, 6]), false);
        let ia = tape.leaf(randn(&mut rng, &[2, 8, 6, 6]), false);
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let out = dafm_forward(&mut g, "s3.dafm", va, ia, &cfg).unwrap();
        let ca = tape.value(out.channel_attention.unwrap());
        let sa = tape.value(out.spatial_attention.unwrap());
        assert_eq!(ca.shape(), &[2, 8]);
        assert_eq!(sa.shape(), &[2, 1, 6, 6]);
        assert!(ca.iter().chain(sa.iter()).all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn block_gradients_reach_every_parameter() {
        let cfg = DafmConfig::new(4);
        let (store, mut rng) = registered(65, &cfg);
        let mut tape: Tape<f64> = Tape::new();
        let mut binder = Binder::new();
        let va = tape.leaf(randn(&mut rng, &[3, 4, 5, 5]), true);
        let ia = tape.leaf(randn(&mut rng, &[3, 4, 5, 5]), true);
        let mut g = Graph::new(&mut tape, &mut binder, &store);
        let out = dafm_forward(&mut g, "s3.dafm", va, ia, &cfg).unwrap();
        let sq = tape.mul(out.fused, out.fused);
        let loss = tape.mean_all(sq);
        let grads = tape.backward(loss);
        for (name, var) in binder.bound() {
            let gr = grads
                .get(var)
                .unwrap_or_else(|| panic!("no gradient flowed into {name}"));
            assert!(
                gr.iter().any(|&v| v != 0.0),
                "gradient for {name} is identically zero"
            );
        }
        assert!(
            grads.get(va).unwrap().iter().any(|&v| v != 0.0),
            "fusion must stay differentiable in the visible stream"
        );
    }
}
