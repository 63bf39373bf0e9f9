//! The training loop: deterministic batching, per-step identity checks,
//! per-epoch evaluation and checkpointing. Single-threaded on purpose,
//! so a fixed seed reproduces the loss trajectory bit for bit.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CodafError, Result};
use crate::eval::{coco_ap, Detection};
use crate::harness::checkpoint;
use crate::harness::config::TrainConfig;
use crate::harness::metrics::{write_csv, EvalRow, StepRow};
use crate::model::{
    decode_detections, model_forward, model_loss, register_model_params, ModelConfig, TargetBox,
};
use crate::params::{AdamW, Binder, Graph, ParamStore};
use crate::synthgen::Dataset;
use crate::tape::Tape;

/// Tolerance on the per-step loss composition identities.
pub const IDENTITY_TOL: f64 = 1e-6;

/// Everything a finished run leaves behind.
#[derive(Debug)]
pub struct TrainOutcome {
    pub steps: Vec<StepRow>,
    pub evals: Vec<EvalRow>,
    pub best_ckpt: PathBuf,
    pub last_ckpt: PathBuf,
    pub final_ap50: f64,
    pub final_ap50_95: f64,
}

fn check_dataset(cfg: &ModelConfig, ds: &Dataset, what: &str) -> Result<()> {
    if ds.image_size() != cfg.image_size {
        return Err(CodafError::config(format!(
            "{what} images are {} px, model expects {}",
            ds.image_size(),
            cfg.image_size
        )));
    }
    if ds.manifest.classes != cfg.classes {
        return Err(CodafError::config(format!(
            "{what} annotates {} classes, model head has {}",
            ds.manifest.classes, cfg.classes
        )));
    }
    Ok(())
}

/// Stack dataset images `idxs` into [B, 3, S, S] and [B, 1, S, S] plus
/// their per-image targets.
fn load_batch(
    ds: &Dataset,
    idxs: &[usize],
    size: usize,
) -> Result<(ArrayD<f32>, ArrayD<f32>, Vec<Vec<TargetBox>>, Vec<usize>)> {
    let b = idxs.len();
    let mut rgb = ArrayD::<f32>::zeros(IxDyn(&[b, 3, size, size]));
    let mut ir = ArrayD::<f32>::zeros(IxDyn(&[b, 1, size, size]));
    let mut targets = Vec::with_capacity(b);
    let mut ids = Vec::with_capacity(b);
    for (row, &idx) in idxs.iter().enumerate() {
        let (r, i) = ds.pair::<f32>(idx)?;
        rgb.slice_mut(ndarray::s![row, .., .., ..]).assign(
            &r.view().into_dimensionality::<ndarray::Ix3>().expect("pair returns rank 3"),
        );
        ir.slice_mut(ndarray::s![row, .., .., ..]).assign(
            &i.view().into_dimensionality::<ndarray::Ix3>().expect("pair returns rank 3"),
        );
        targets.push(ds.targets(idx));
        ids.push(ds.records[idx].id);
    }
    Ok((rgb, ir, targets, ids))
}

/// Run the detector over a whole split and score it.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore<f32>,
    ds: &Dataset,
    batch: usize,
) -> Result<(f64, f64)> {
    check_dataset(cfg, ds, "evaluation")?;
    let idxs: Vec<usize> = (0..ds.len()).collect();
    let mut dets: Vec<Detection> = Vec::new();
    for chunk in idxs.chunks(batch.max(1)) {
        let (rgb, ir, _, ids) = load_batch(ds, chunk, cfg.image_size)?;
        let mut tape: Tape<f32> = Tape::new();
        let mut binder = Binder::new();
        let mut g = Graph::new(&mut tape, &mut binder, store);
        let rv = g.tape.leaf(rgb, false);
        let iv = g.tape.leaf(ir, false);
        let fwd = model_forward(&mut g, cfg, rv, iv)?;
        dets.extend(decode_detections(&tape, cfg, &fwd, &ids)?);
    }
    coco_ap(&dets, &ds.gt_boxes())
}

/// Mix a step identity into the run seed for negative sampling.
fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((epoch as u64) << 32)
        .wrapping_add(step as u64 + 1)
}

/// Train a model from scratch, leaving metrics and checkpoints in
/// `out_dir`.
pub fn train(
    cfg: &TrainConfig,
    train_dir: &Path,
    eval_dir: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| CodafError::io(out_dir, e))?;
    let train_ds = Dataset::load(train_dir)?;
    let eval_ds = Dataset::load(eval_dir)?;
    check_dataset(&cfg.model, &train_ds, "training")?;
    check_dataset(&cfg.model, &eval_ds, "evaluation")?;

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut store: ParamStore<f32> = ParamStore::new();
    register_model_params(&mut store, &mut init_rng, &cfg.model)?;
    let mut opt: AdamW<f32> = AdamW::new(cfg.lr, cfg.weight_decay);

    let best_ckpt = out_dir.join("best.ckpt");
    let last_ckpt = out_dir.join("last.ckpt");
    let mut steps: Vec<StepRow> = Vec::new();
    let mut evals: Vec<EvalRow> = Vec::new();
    let mut best_ap50 = f64::NEG_INFINITY;
    let started = Instant::now();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train_ds.len()).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64).wrapping_add(1));
        order.shuffle(&mut shuffle_rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let (rgb, ir, targets, _) = load_batch(&train_ds, chunk, cfg.model.image_size)?;
            let mut tape: Tape<f32> = Tape::new();
            let mut binder = Binder::new();
            let step_loss = {
                let mut g = Graph::new(&mut tape, &mut binder, &store);
                let rv = g.tape.leaf(rgb, false);
                let iv = g.tape.leaf(ir, false);
                let fwd = model_forward(&mut g, &cfg.model, rv, iv)?;
                model_loss(&mut g, &cfg.model, &fwd, &targets, step_seed(cfg.seed, epoch, step))?
            };
            if !step_loss.breakdown.total.is_finite() {
                return Err(CodafError::numeric(format!(
                    "total loss became non-finite at epoch {epoch} step {step}: {:?}",
                    step_loss.breakdown
                )));
            }
            step_loss.breakdown.verify(cfg.model.lambda, IDENTITY_TOL).map_err(|e| {
                CodafError::numeric(format!("epoch {epoch} step {step}: {e}"))
            })?;
            let mut grads = tape.backward(step_loss.total);
            let mut named = std::collections::BTreeMap::new();
            for (name, var) in binder.bound() {
                if let Some(g) = grads.take(var) {
                    named.insert(name.clone(), g);
                }
            }
            opt.step(&mut store, &named).map_err(|e| {
                CodafError::numeric(format!("epoch {epoch} step {step}: {e}"))
            })?;
            steps.push(StepRow::new(epoch, step, &step_loss.breakdown, cfg.model.lambda));
        }

        let (ap50, ap50_95) = evaluate(&cfg.model, &store, &eval_ds, cfg.eval_batch)?;
        evals.push(EvalRow { epoch, ap50, ap50_95, wall_s: started.elapsed().as_secs_f64() });
        let meta = serde_json::json!({
            "epoch": epoch,
            "ap50": ap50,
            "ap50_95": ap50_95,
            "seed": cfg.seed,
            "model": cfg.model,
        });
        checkpoint::save(&last_ckpt, &store, &meta)?;
        if ap50 > best_ap50 {
            best_ap50 = ap50;
            checkpoint::save(&best_ckpt, &store, &meta)?;
        }
    }

    write_csv(&out_dir.join("steps.csv"), &steps)?;
    write_csv(&out_dir.join("eval.csv"), &evals)?;
    let last = evals.last().expect("at least one epoch ran");
    Ok(TrainOutcome {
        steps,
        evals: evals.clone(),
        best_ckpt,
        last_ckpt,
        final_ap50: last.ap50,
        final_ap50_95: last.ap50_95,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    use crate::synthgen::{generate, GenConfig};

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 3,
            eval_batch: 4,
            model: ModelConfig {
                image_size: 64,
                channels: [8, 12, 16],
                embed_dim: 8,
                neck_channels: 8,
                head_channels: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data(dir: &Path, seed: u64, count: usize) {
        let cfg = GenConfig { seed, count, image_size: 64, ..GenConfig::default() };
        generate(&cfg, dir).unwrap();
    }

    #[test]
    fn two_runs_share_the_same_loss_trajectory_bitwise() {
        let data = TempDir::new().unwrap();
        let train_dir = data.path().join("train");
        let eval_dir = data.path().join("eval");
        tiny_data(&train_dir, 1, 6);
        tiny_data(&eval_dir, 2, 4);
        let cfg = tiny_train_cfg();
        let (o1, o2) = (TempDir::new().unwrap(), TempDir::new().unwrap());
        let r1 = train(&cfg, &train_dir, &eval_dir, o1.path()).unwrap();
        let r2 = train(&cfg, &train_dir, &eval_dir, o2.path()).unwrap();
        assert_eq!(r1.steps.len(), r2.steps.len());
        for (a, b) in r1.steps.iter().zip(&r2.steps) {
            assert_eq!(
                a.total.to_bits(),
                b.total.to_bits(),
                "step {} totals diverged: {} vs {}",
                a.step,
                a.total,
                b.total
            );
            assert_eq!(a.det.to_bits(), b.det.to_bits(), "step {} det diverged", a.step);
        }
        assert_eq!(
            std::fs::read(&r1.last_ckpt).unwrap(),
            std::fs::read(&r2.last_ckpt).unwrap(),
            "the final checkpoints must be byte-identical"
        );
        assert_eq!(r1.final_ap50.to_bits(), r2.final_ap50.to_bits());
    }

    #[test]
    fn every_step_satisfies_the_composition_identities() {
        let data = TempDir::new().unwrap();
        let train_dir = data.path().join("train");
        let eval_dir = data.path().join("eval");
        tiny_data(&train_dir, 3, 6);
        tiny_data(&eval_dir, 4, 3);
        let out = TempDir::new().unwrap();
        let outcome = train(&tiny_train_cfg(), &train_dir, &eval_dir, out.path()).unwrap();
        assert!(!outcome.steps.is_empty());
        for row in &outcome.steps {
            assert!(
                row.identity_gap <= IDENTITY_TOL,
                "step {} identity gap {} breaches {IDENTITY_TOL}",
                row.step,
                row.identity_gap
            );
            assert!(row.total.is_finite());
        }
        assert!(out.path().join("steps.csv").exists());
        assert!(out.path().join("eval.csv").exists());
        assert!(outcome.best_ckpt.exists() && outcome.last_ckpt.exists());
    }

    #[test]
    fn reloaded_checkpoint_evaluates_identically() {
        let data = TempDir::new().unwrap();
        let train_dir = data.path().join("train");
        let eval_dir = data.path().join("eval");
        tiny_data(&train_dir, 5, 5);
        tiny_data(&eval_dir, 6, 4);
        let out = TempDir::new().unwrap();
        let cfg = tiny_train_cfg();
        let outcome = train(&cfg, &train_dir, &eval_dir, out.path()).unwrap();
        let (store, meta) = checkpoint::load(&outcome.last_ckpt).unwrap();
        let eval_ds = Dataset::load(&eval_dir).unwrap();
        let (ap50, ap50_95) = evaluate(&cfg.model, &store, &eval_ds, cfg.eval_batch).unwrap();
        assert_eq!(
            ap50.to_bits(),
            outcome.final_ap50.to_bits(),
            "checkpointed weights must reproduce the final score exactly"
        );
        assert_eq!(ap50_95.to_bits(), outcome.final_ap50_95.to_bits());
        assert_eq!(meta["epoch"], serde_json::json!(0));
    }

    #[test]
    fn mismatched_dataset_geometry_is_rejected() {
        let data = TempDir::new().unwrap();
        let train_dir = data.path().join("train");
        let eval_dir = data.path().join("eval");
        tiny_data(&train_dir, 7, 3);
        tiny_data(&eval_dir, 8, 2);
        let mut cfg = tiny_train_cfg();
        cfg.model.image_size = 128;
        let out = TempDir::new().unwrap();
        let err = train(&cfg, &train_dir, &eval_dir, out.path()).unwrap_err();
        assert!(format!("{err}").contains("px"), "size mismatch should name pixels: {err}");
    }
}
