//! Ablation driver: trains a family of model variants on one shared
//! dataset pair and tabulates their detection quality, so the
//! contribution of each module can be read off a single CSV.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{CodafError, Result};
use crate::harness::config::TrainConfig;
use crate::harness::metrics::write_csv;
use crate::harness::train::train;
use crate::model::ModelConfig;

/// One trainable configuration in an ablation family.
#[derive(Debug, Clone, PartialEq)]
pub enum Variant {
    /// The full model with every module enabled.
    Full,
    /// Plain two-stream fusion: no alignment, no gating, no attention.
    Baseline,
    /// Alignment module removed, everything else kept.
    NoAlignment,
    /// Attention-guided gate removed from the fusion block.
    NoGate,
    /// Cross-modality channel recalibration removed.
    NoRecalibration,
    /// Contrastive embedding heads removed.
    NoContrastive,
    /// Attention map computed from the infrared stream instead.
    InfraredAttention,
    /// Alignment restricted to a single pyramid stage.
    OnlyStage(usize),
    /// Full model with a different alignment weight.
    Lambda(f64),
    /// Full model with a different contrastive temperature.
    Tau(f64),
}

impl Variant {
    /// Short name used in run directories and the results table.
    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".to_string(),
            Variant::Baseline => "baseline".to_string(),
            Variant::NoAlignment => "no-align".to_string(),
            Variant::NoGate => "no-gate".to_string(),
            Variant::NoRecalibration => "no-recal".to_string(),
            Variant::NoContrastive => "no-contrast".to_string(),
            Variant::InfraredAttention => "ir-attention".to_string(),
            Variant::OnlyStage(s) => format!("stage-{s}"),
            Variant::Lambda(l) => format!("lambda-{l:.2}"),
            Variant::Tau(t) => format!("tau-{t:.2}"),
        }
    }

    /// Produce the model configuration for this variant.
    pub fn configure(&self, base: &ModelConfig) -> ModelConfig {
        let mut cfg = base.clone();
        match self {
            Variant::Full => {}
            Variant::Baseline => {
                cfg.osa = false;
                cfg.contrastive = false;
                cfg.magn = false;
                cfg.dacm = false;
            }
            Variant::NoAlignment => {
                cfg.osa = false;
                // Without aligned features there is nothing to contrast.
                cfg.contrastive = false;
            }
            Variant::NoGate => cfg.magn = false,
            Variant::NoRecalibration => cfg.dacm = false,
            Variant::NoContrastive => cfg.contrastive = false,
            Variant::InfraredAttention => cfg.attention_from_visible = false,
            Variant::OnlyStage(s) => {
                cfg.active_stages = [false; 3];
                if let Some(flag) = cfg.active_stages.get_mut(*s) {
                    *flag = true;
                }
            }
            Variant::Lambda(l) => cfg.lambda = *l,
            Variant::Tau(t) => cfg.tau = *t,
        }
        cfg
    }
}

/// The module-removal family reported in the main comparison.
pub fn standard_variants() -> Vec<Variant> {
    vec![Variant::Full, Variant::Baseline, Variant::NoAlignment, Variant::NoGate]
}

/// The alignment-weight sweep, reported for tuning only.
pub fn lambda_sweep() -> Vec<Variant> {
    (1..=9).map(|i| Variant::Lambda(i as f64 / 10.0)).collect()
}

/// One trained run in the ablation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub ap50: f64,
    pub ap50_95: f64,
    pub final_total: f64,
    pub wall_s: f64,
}

/// Train every variant with every seed and write `ablation.csv` under
/// `out_dir`. Run directories are per variant and seed.
pub fn run_ablation(
    base: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
    train_dir: &Path,
    eval_dir: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationRow>> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(CodafError::config("ablation needs at least one variant and one seed"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| CodafError::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(variants.len() * seeds.len());
    for variant in variants {
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.model = variant.configure(&base.model);
            cfg.seed = seed;
            let run_dir = out_dir.join(format!("{}-s{seed}", variant.name()));
            let start = Instant::now();
            let outcome = train(&cfg, train_dir, eval_dir, &run_dir)?;
            let wall_s = start.elapsed().as_secs_f64();
            let final_total = outcome.steps.last().map(|s| s.total).unwrap_or(f64::NAN);
            println!(
                "{:<14} seed {seed}  ap50 {:.4}  ap50_95 {:.4}  loss {:.4}  {:.1}s",
                variant.name(),
                outcome.final_ap50,
                outcome.final_ap50_95,
                final_total,
                wall_s
            );
            rows.push(AblationRow {
                variant: variant.name(),
                seed,
                ap50: outcome.final_ap50,
                ap50_95: outcome.final_ap50_95,
                final_total,
                wall_s,
            });
        }
    }
    write_csv(&out_dir.join("ablation.csv"), &rows)?;
    Ok(rows)
}

/// Mean detection quality of one variant across seeds.
pub fn mean_ap50(rows: &[AblationRow], variant: &str) -> Option<f64> {
    let aps: Vec<f64> =
        rows.iter().filter(|r| r.variant == variant).map(|r| r.ap50).collect();
    if aps.is_empty() {
        None
    } else {
        Some(aps.iter().sum::<f64>() / aps.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_flip_the_intended_flags() {
        let base = ModelConfig::default();
        assert!(base.osa && base.magn && base.dacm && base.contrastive, "default is the full model");
        let no_align = Variant::NoAlignment.configure(&base);
        assert!(!no_align.osa && !no_align.contrastive, "alignment removal disables contrast too");
        assert!(no_align.magn && no_align.dacm, "fusion modules survive alignment removal");
        let no_gate = Variant::NoGate.configure(&base);
        assert!(!no_gate.magn && no_gate.osa, "gate removal leaves alignment on");
        let stage = Variant::OnlyStage(1).configure(&base);
        assert_eq!(stage.active_stages, [false, true, false], "one stage stays active");
        let lam = Variant::Lambda(0.7).configure(&base);
        assert!((lam.lambda - 0.7).abs() < 1e-12, "weight override lands in the config");
        let baseline = Variant::Baseline.configure(&base);
        assert!(
            !baseline.osa && !baseline.magn && !baseline.dacm && !baseline.contrastive,
            "baseline strips every module"
        );
    }

    #[test]
    fn names_are_distinct_within_a_family() {
        let mut all: Vec<String> = standard_variants().iter().map(|v| v.name()).collect();
        all.extend(lambda_sweep().iter().map(|v| v.name()));
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(all.len(), dedup.len(), "variant names must not collide");
    }

    #[test]
    fn lambda_sweep_covers_the_grid() {
        let sweep = lambda_sweep();
        assert_eq!(sweep.len(), 9, "nine weights from 0.1 to 0.9");
        match (&sweep[0], &sweep[8]) {
            (Variant::Lambda(a), Variant::Lambda(b)) => {
                assert!((a - 0.1).abs() < 1e-12 && (b - 0.9).abs() < 1e-12, "grid endpoints");
            }
            other => panic!("unexpected sweep endpoints {other:?}"),
        }
    }
}
