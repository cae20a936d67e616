//! Command-line front end for the imputation laboratory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use imputelab::adversarial::{checkpoint::save_bundle, write_curves_csv};
use imputelab::data::io::{load_dataset, save_dataset};
use imputelab::data::Dataset;
use imputelab::diff::AdamConfig;
use imputelab::downstream::{auc, score_records, train_mlm, MetricsRow, MlmMode, MlmTrainConfig};
use imputelab::harness::pipeline::{
    assemble_cell_records, conditioning_completion, prepare_replicate, Replicate,
};
use imputelab::harness::{
    complete_factors, complete_images, config::SweepAxis, emit_report, parse_metrics_csv,
    run_grid, run_sweep, sort_rows, FactorImputerKind, HarnessConfig, ImageImputerKind,
};
use imputelab::rng::derive_seed;
use imputelab::synthgen::{make_dataset, GeneratorConfig};

#[derive(Parser)]
#[command(name = "imputelab", version, about = "Multi-modal missing-data imputation laboratory")]
struct Cli {
    /// Config file (line-oriented `key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override run.seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for grid/sweep cells (0 = automatic).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort and write train/validation/test files.
    Generate,
    /// Corrupt a generated cohort with the configured missingness.
    Corrupt {
        /// Directory holding train.ds / validation.ds / test.ds.
        #[arg(long, default_value = "out")]
        input: PathBuf,
    },
    /// Train the selected imputers on a corrupted cohort; write completed
    /// datasets plus adversarial checkpoints and loss curves.
    Impute {
        #[arg(long, default_value = "out")]
        input: PathBuf,
        #[arg(long, default_value = "cpbigan")]
        image_imputer: String,
        #[arg(long, default_value = "cpbigan")]
        factor_imputer: String,
    },
    /// Train the downstream risk model on completed datasets and report AUC.
    Train {
        #[arg(long, default_value = "out")]
        input: PathBuf,
        /// full | image_only | factor_only
        #[arg(long, default_value = "full")]
        mode: String,
    },
    /// Run the imputer grid and emit metrics plus reports.
    Grid,
    /// Run a missing-rate sweep along one axis.
    Sweep {
        /// factor_rate | tp1_rate (defaults to the config's sweep.axis).
        #[arg(long)]
        axis: Option<String>,
    },
    /// Re-emit report files from an existing metrics CSV.
    Report {
        #[arg(long)]
        rows: PathBuf,
        /// Axis for sweep plots; omit for a plain CSV re-emit.
        #[arg(long)]
        axis: Option<String>,
    },
    /// Run the finite-difference gradient certification battery.
    Gradcheck {
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[arg(long, default_value_t = 24)]
        coords_per_tensor: usize,
    },
}

/// Exit codes by error category.
mod exit {
    pub const CONFIG: u8 = 2;
    pub const IO: u8 = 3;
    pub const DATA: u8 = 4;
    pub const TRAIN: u8 = 5;
    pub const CHECK: u8 = 6;
}

fn fail(category: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(category)
}

fn load_config(cli: &Cli) -> Result<HarnessConfig, String> {
    let mut cfg = match &cli.config {
        Some(path) => HarnessConfig::load(path).map_err(|e| e.to_string())?,
        None => HarnessConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.run_seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.run_jobs = jobs;
    }
    Ok(cfg)
}

fn split_paths(dir: &Path) -> [PathBuf; 3] {
    [
        dir.join("train.ds"),
        dir.join("validation.ds"),
        dir.join("test.ds"),
    ]
}

fn load_splits(dir: &Path) -> Result<[Dataset; 3], String> {
    let [t, v, e] = split_paths(dir);
    Ok([
        load_dataset(&t).map_err(|e| e.to_string())?,
        load_dataset(&v).map_err(|e| e.to_string())?,
        load_dataset(&e).map_err(|e| e.to_string())?,
    ])
}

fn save_splits(dir: &Path, splits: &[Dataset; 3]) -> Result<(), String> {
    std::fs::create_dir_all(dir).map_err(|e| e.to_string())?;
    for (ds, path) in splits.iter().zip(split_paths(dir)) {
        save_dataset(ds, &path).map_err(|e| e.to_string())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => return fail(exit::CONFIG, e),
    };
    if cfg.run_jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.run_jobs)
            .build_global();
    }
    let digest = cfg.digest();

    match &cli.command {
        Command::Generate => {
            let gen_cfg = GeneratorConfig {
                n: cfg.generator_n,
                class_balance: cfg.generator_class_balance,
                noise_scale: cfg.generator_noise_scale,
                signal_strength: cfg.generator_signal_strength,
                seed: cfg.run_seed,
            };
            let (train, val, test) = match make_dataset(&gen_cfg) {
                Ok(x) => x,
                Err(e) => return fail(exit::DATA, e),
            };
            let sizes = (train.len(), val.len(), test.len());
            if let Err(e) = save_splits(&cli.out, &[train, val, test]) {
                return fail(exit::IO, e);
            }
            println!(
                "generated {} / {} / {} records into {} (config digest {digest})",
                sizes.0,
                sizes.1,
                sizes.2,
                cli.out.display()
            );
            ExitCode::SUCCESS
        }
        Command::Corrupt { input } => {
            let [train, val, test] = match load_splits(input) {
                Ok(x) => x,
                Err(e) => return fail(exit::IO, e),
            };
            let rep = match prepare_replicate(&cfg, cfg.grid_seeds[0]) {
                Ok(r) => r,
                Err(e) => return fail(exit::DATA, e),
            };
            let corrupted = [
                Dataset {
                    records: rep.corrupt_train,
                    split: train.split,
                    stats: train.stats,
                },
                Dataset {
                    records: rep.corrupt_val,
                    split: val.split,
                    stats: val.stats,
                },
                Dataset {
                    records: rep.corrupt_test,
                    split: test.split,
                    stats: test.stats,
                },
            ];
            let factor_missing = {
                let total: usize = corrupted[0].records.iter().map(|r| r.factors.len()).sum();
                let missing: usize = corrupted[0]
                    .records
                    .iter()
                    .map(|r| r.factors.mask.iter().filter(|&&m| m == 0).count())
                    .sum();
                missing as f64 / total.max(1) as f64
            };
            let tp1_missing = corrupted[0]
                .records
                .iter()
                .filter(|r| !r.images.tp1_present)
                .count() as f64
                / corrupted[0].len().max(1) as f64;
            if let Err(e) = save_splits(&cli.out, &corrupted) {
                return fail(exit::IO, e);
            }
            println!(
                "corrupted cohort written to {} (train factor-missing {factor_missing:.3}, tp1-missing {tp1_missing:.3})",
                cli.out.display(),
            );
            ExitCode::SUCCESS
        }
        Command::Impute {
            input,
            image_imputer,
            factor_imputer,
        } => {
            let image_kind = match ImageImputerKind::parse(image_imputer) {
                Some(k) => k,
                None => {
                    return fail(exit::CONFIG, format!("unknown image imputer {image_imputer:?}"))
                }
            };
            let factor_kind = match FactorImputerKind::parse(factor_imputer) {
                Some(k) => k,
                None => {
                    return fail(exit::CONFIG, format!("unknown factor imputer {factor_imputer:?}"))
                }
            };
            let [train, val, test] = match load_splits(input) {
                Ok(x) => x,
                Err(e) => return fail(exit::IO, e),
            };
            // The loaded corrupted splits stand in for both the clean and
            // corrupt views; "observed" axes are not meaningful here.
            if image_kind == ImageImputerKind::Observed || factor_kind == FactorImputerKind::Observed {
                return fail(
                    exit::CONFIG,
                    "`impute` completes corrupted data; use the grid for fully-observed cells",
                );
            }
            let rep = Replicate {
                corrupt_train: train.records.clone(),
                corrupt_val: val.records.clone(),
                corrupt_test: test.records.clone(),
                clean_train: train.clone(),
                clean_val: val.clone(),
                clean_test: test.clone(),
                replicate_seed: derive_seed(cfg.run_seed, "cli-impute"),
                seed_value: cfg.grid_seeds[0],
            };
            let factors = match complete_factors(&cfg, &rep, factor_kind) {
                Ok(f) => f,
                Err(e) => return fail(exit::TRAIN, e),
            };
            let needs_cond = matches!(
                image_kind,
                ImageImputerKind::Cpbigan | ImageImputerKind::CpbiganSharp
            );
            let images = {
                let conditioning = if needs_cond {
                    match conditioning_completion(&cfg, &rep) {
                        Ok(c) => c,
                        Err(e) => return fail(exit::TRAIN, e),
                    }
                } else {
                    factors.clone()
                };
                match complete_images(&cfg, &rep, image_kind, &conditioning) {
                    Ok(i) => i,
                    Err(e) => return fail(exit::TRAIN, e),
                }
            };
            let assembled = [
                Dataset {
                    records: assemble_cell_records(&images.train, &factors.train),
                    split: train.split,
                    stats: train.stats.clone(),
                },
                Dataset {
                    records: assemble_cell_records(&images.val, &factors.val),
                    split: val.split,
                    stats: val.stats.clone(),
                },
                Dataset {
                    records: assemble_cell_records(&images.test, &factors.test),
                    split: test.split,
                    stats: test.stats.clone(),
                },
            ];
            if let Err(e) = save_splits(&cli.out, &assembled) {
                return fail(exit::IO, e);
            }
            for (label, artifacts) in [
                ("factor", factors.artifacts.as_ref()),
                ("image", images.artifacts.as_ref()),
            ] {
                let Some(art) = artifacts else { continue };
                let ckpt = cli.out.join(format!("{label}_bundle.ckpt"));
                if let Err(e) = save_bundle(&art.bundle, &ckpt) {
                    return fail(exit::IO, e);
                }
                let curves = cli.out.join(format!("{label}_curves.csv"));
                if let Err(e) =
                    write_curves_csv(&art.curves, &curves, &digest, env!("CARGO_PKG_VERSION"))
                {
                    return fail(exit::IO, e);
                }
                println!("wrote {} and {}", ckpt.display(), curves.display());
            }
            if let Some(lambda) = factors.chosen_lambda {
                println!("soft-impute chose lambda = {lambda}");
            }
            println!(
                "imputed cohort ({} / {}) written to {}",
                image_kind.as_str(),
                factor_kind.as_str(),
                cli.out.display()
            );
            ExitCode::SUCCESS
        }
        Command::Train { input, mode } => {
            let mode = match mode.as_str() {
                "full" => MlmMode::Full,
                "image_only" => MlmMode::ImageOnly,
                "factor_only" => MlmMode::FactorOnly,
                other => return fail(exit::CONFIG, format!("unknown mode {other:?}")),
            };
            let [train, val, test] = match load_splits(input) {
                Ok(x) => x,
                Err(e) => return fail(exit::IO, e),
            };
            let tcfg = MlmTrainConfig {
                adam: AdamConfig::default().with_lr(cfg.mlm_lr),
                batch: cfg.mlm_batch,
                epochs: cfg.mlm_epochs,
                mode,
                seed: derive_seed(cfg.run_seed, "cli-train"),
            };
            let out = match train_mlm(&train.records, &val.records, &tcfg) {
                Ok(o) => o,
                Err(e) => return fail(exit::TRAIN, e),
            };
            let scores = match score_records(&out.model, &test.records) {
                Ok(s) => s,
                Err(e) => return fail(exit::TRAIN, e),
            };
            let labels: Vec<u8> = test.records.iter().map(|r| r.label).collect();
            let test_auc = match auc(&scores, &labels) {
                Ok(a) => a,
                Err(e) => return fail(exit::DATA, e),
            };
            println!(
                "test AUC {test_auc:.4} (best validation AUC {:.4} at epoch {})",
                out.best_val_auc, out.best_epoch
            );
            let row = MetricsRow {
                image_imputer: "cli".into(),
                factor_imputer: "cli".into(),
                mechanism: cfg.missing_mechanism.as_str().into(),
                factor_rate: cfg.missing_factor_rate,
                tp1_rate: cfg.missing_tp1_rate,
                seed: cfg.run_seed,
                auc: test_auc,
                p_value: None,
            };
            if let Err(e) = emit_report(&[row], &cli.out, "train_metrics", None, &digest) {
                return fail(exit::IO, e);
            }
            ExitCode::SUCCESS
        }
        Command::Grid => {
            let out = match run_grid(&cfg) {
                Ok(o) => o,
                Err(e) => return fail(exit::TRAIN, e),
            };
            for f in &out.failures {
                eprintln!(
                    "cell failed: {}/{} seed {}: {}",
                    f.image_imputer, f.factor_imputer, f.seed, f.error
                );
            }
            if let Err(e) = emit_report(&out.rows, &cli.out, "grid", None, &digest) {
                return fail(exit::IO, e);
            }
            println!(
                "grid complete: {} rows, {} failures -> {}",
                out.rows.len(),
                out.failures.len(),
                cli.out.join("grid.csv").display()
            );
            if out.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(exit::TRAIN)
            }
        }
        Command::Sweep { axis } => {
            let axis = match axis
                .as_deref()
                .map(|a| SweepAxis::parse(a).ok_or_else(|| format!("unknown axis {a:?}")))
                .transpose()
            {
                Ok(a) => a.unwrap_or(cfg.sweep_axis),
                Err(e) => return fail(exit::CONFIG, e),
            };
            let out = match run_sweep(&cfg, axis, &cfg.sweep_rates) {
                Ok(o) => o,
                Err(e) => return fail(exit::TRAIN, e),
            };
            for f in &out.failures {
                eprintln!(
                    "sweep cell failed: {}/{} seed {}: {}",
                    f.image_imputer, f.factor_imputer, f.seed, f.error
                );
            }
            if let Err(e) = emit_report(&out.rows, &cli.out, "sweep", Some(axis), &digest) {
                return fail(exit::IO, e);
            }
            println!(
                "sweep complete: {} rows -> {}",
                out.rows.len(),
                cli.out.join("sweep.csv").display()
            );
            if out.failures.is_empty() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(exit::TRAIN)
            }
        }
        Command::Report { rows, axis } => {
            let text = match std::fs::read_to_string(rows) {
                Ok(t) => t,
                Err(e) => return fail(exit::IO, format!("read {}: {e}", rows.display())),
            };
            let mut parsed = match parse_metrics_csv(&text) {
                Ok(p) => p,
                Err(e) => return fail(exit::DATA, e),
            };
            sort_rows(&mut parsed);
            let axis = match axis
                .as_deref()
                .map(|a| SweepAxis::parse(a).ok_or_else(|| format!("unknown axis {a:?}")))
                .transpose()
            {
                Ok(a) => a,
                Err(e) => return fail(exit::CONFIG, e),
            };
            match emit_report(&parsed, &cli.out, "report", axis, &digest) {
                Ok(paths) => {
                    for p in paths {
                        println!("wrote {}", p.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(exit::IO, e),
            }
        }
        Command::Gradcheck {
            seeds,
            coords_per_tensor,
        } => {
            let seeds: Vec<u64> = match seeds
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<Result<_, _>>()
            {
                Ok(s) => s,
                Err(e) => return fail(exit::CONFIG, format!("bad seeds: {e}")),
            };
            let entries = imputelab::certify::run_certification(&seeds, *coords_per_tensor, 1e-3);
            let mut ok = true;
            for e in &entries {
                println!("{:<44} {}", e.name, e.report.summary());
                ok &= e.report.passed();
            }
            if ok {
                println!("all gradient checks passed");
                ExitCode::SUCCESS
            } else {
                fail(exit::CHECK, "gradient certification failed")
            }
        }
    }
}
