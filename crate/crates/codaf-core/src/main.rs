//! Command-line front end: dataset generation, training, evaluation,
//! ablations, the verification battery and chart rendering.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use codaf_core::harness::ablate::{self, Variant};
use codaf_core::harness::check;
use codaf_core::harness::checkpoint;
use codaf_core::harness::config::TrainConfig;
use codaf_core::harness::metrics::{read_csv, StepRow};
use codaf_core::harness::plot;
use codaf_core::harness::train;
use codaf_core::model::ModelConfig;
use codaf_core::synthgen::{generate, Dataset, GenConfig, ShiftMode};
use codaf_core::{CodafError, Result};

#[derive(Parser)]
#[command(name = "codaf", version, about = "Weakly aligned two-stream detector workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic paired-image dataset.
    GenData {
        /// Output directory for images and annotations.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 128)]
        image_size: usize,
        /// Largest cross-modality displacement per axis, pixels.
        #[arg(long, default_value_t = 5.0)]
        max_shift: f64,
        /// Fraction of scenes rendered at night.
        #[arg(long, default_value_t = 0.5)]
        night_fraction: f64,
        /// Move the whole visible frame instead of each object.
        #[arg(long)]
        global_shift: bool,
    },
    /// Train a model and leave checkpoints plus metric logs behind.
    Train {
        /// TOML run configuration; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        eval_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override the configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TOML run configuration; falls back to the checkpoint's own.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8)]
        batch: usize,
    },
    /// Train a family of model variants and tabulate their quality.
    Ablate {
        #[arg(long)]
        train_dir: PathBuf,
        #[arg(long)]
        eval_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2", value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Which variants to run: standard, lambda or all.
        #[arg(long, default_value = "standard")]
        family: String,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the verification battery: reference equivalence, the
    /// deformable degeneracy sweep and the per-operation gradient audit.
    Check {
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 20)]
        cases: usize,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negate a weight gradient on purpose; exits clean only if the
        /// audit flags it.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Render charts from run logs and ablation tables.
    Plot {
        /// Training run directory holding steps.csv.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Ablation table (ablation.csv).
        #[arg(long)]
        ablation: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_train_config(path: &Option<PathBuf>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => Ok(TrainConfig::default()),
    }
}

fn run_gen_data(
    out: &Path,
    count: usize,
    seed: u64,
    image_size: usize,
    max_shift: f64,
    night_fraction: f64,
    global_shift: bool,
) -> Result<()> {
    let cfg = GenConfig {
        seed,
        count,
        image_size,
        max_shift,
        shift_mode: if global_shift { ShiftMode::Global } else { ShiftMode::PerObject },
        night_fraction,
    };
    let manifest = generate(&cfg, out)?;
    println!("wrote {count} pairs to {}", out.display());
    println!("digest {}", manifest.sha256);
    Ok(())
}

fn run_train(
    config: &Option<PathBuf>,
    train_dir: &Path,
    eval_dir: &Path,
    out: &Path,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg = load_train_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let outcome = train::train(&cfg, train_dir, eval_dir, out)?;
    println!(
        "trained {} epochs: ap50 {:.4}  ap50_95 {:.4}",
        cfg.epochs, outcome.final_ap50, outcome.final_ap50_95
    );
    println!("checkpoints and logs in {}", out.display());
    Ok(())
}

fn run_eval(ckpt: &Path, config: &Option<PathBuf>, data: &Path, batch: usize) -> Result<()> {
    let (store, meta) = checkpoint::load(ckpt)?;
    let model: ModelConfig = match config {
        Some(p) => TrainConfig::load(p)?.model,
        None => serde_json::from_value(meta["model"].clone()).map_err(|e| {
            CodafError::config(format!(
                "checkpoint carries no model configuration ({e}); pass --config"
            ))
        })?,
    };
    let ds = Dataset::load(data)?;
    let (ap50, ap50_95) = train::evaluate(&model, &store, &ds, batch)?;
    println!("ap50 {ap50:.6}");
    println!("ap50_95 {ap50_95:.6}");
    Ok(())
}

fn run_ablate(
    train_dir: &Path,
    eval_dir: &Path,
    out: &Path,
    seeds: &[u64],
    family: &str,
    config: &Option<PathBuf>,
) -> Result<()> {
    let cfg = load_train_config(config)?;
    let variants: Vec<Variant> = match family {
        "standard" => ablate::standard_variants(),
        "lambda" => ablate::lambda_sweep(),
        "all" => {
            let mut v = ablate::standard_variants();
            v.extend(ablate::lambda_sweep());
            v
        }
        other => {
            return Err(CodafError::config(format!(
                "unknown variant family {other}; expected standard, lambda or all"
            )))
        }
    };
    let rows = ablate::run_ablation(&cfg, &variants, seeds, train_dir, eval_dir, out)?;
    for variant in &variants {
        let name = variant.name();
        if let Some(ap) = ablate::mean_ap50(&rows, &name) {
            println!("{name:<14} mean ap50 {ap:.4}");
        }
    }
    println!("table in {}", out.join("ablation.csv").display());
    Ok(())
}

fn run_check(trials: usize, cases: usize, seeds: usize, seed: u64, inject_fault: bool) -> Result<()> {
    if inject_fault {
        let report = check::conv_fault_probe(true, seed);
        println!("{}", report.line());
        if report.pass {
            return Err(CodafError::numeric(
                "injected gradient fault went unnoticed; the audit cannot be trusted".to_string(),
            ));
        }
        println!("injected fault was caught");
        return Ok(());
    }
    let (reports, ok) = check::run_all(trials, cases, seeds, seed)?;
    for r in &reports {
        println!("{}", r.line());
    }
    if !ok {
        return Err(CodafError::numeric("verification battery failed".to_string()));
    }
    println!("all {} checks passed", reports.len());
    Ok(())
}

fn run_plot(run: &Option<PathBuf>, ablation: &Option<PathBuf>, out: &Path) -> Result<()> {
    if run.is_none() && ablation.is_none() {
        return Err(CodafError::config("nothing to plot; pass --run and/or --ablation"));
    }
    if let Some(dir) = run {
        let steps: Vec<StepRow> = read_csv(&dir.join("steps.csv"))?;
        let target = out.join("loss_curves.png");
        plot::plot_loss_curves(&steps, &target)?;
        println!("wrote {}", target.display());
    }
    if let Some(table) = ablation {
        let rows: Vec<ablate::AblationRow> = read_csv(table)?;
        let target = out.join("ablation_bars.png");
        plot::plot_ablation_bars(&rows, &target)?;
        println!("wrote {}", target.display());
        if rows.iter().any(|r| r.variant.starts_with("lambda-")) {
            let target = out.join("ap_vs_lambda.png");
            plot::plot_ap_vs_lambda(&rows, &target)?;
            println!("wrote {}", target.display());
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::GenData { out, count, seed, image_size, max_shift, night_fraction, global_shift } => {
            run_gen_data(out, *count, *seed, *image_size, *max_shift, *night_fraction, *global_shift)
        }
        Cmd::Train { config, train_dir, eval_dir, out, seed } => {
            run_train(config, train_dir, eval_dir, out, *seed)
        }
        Cmd::Eval { checkpoint, config, data, batch } => run_eval(checkpoint, config, data, *batch),
        Cmd::Ablate { train_dir, eval_dir, out, seeds, family, config } => {
            run_ablate(train_dir, eval_dir, out, seeds, family, config)
        }
        Cmd::Check { trials, cases, seeds, seed, inject_fault } => {
            run_check(*trials, *cases, *seeds, *seed, *inject_fault)
        }
        Cmd::Plot { run, ablation, out } => run_plot(run, ablation, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
