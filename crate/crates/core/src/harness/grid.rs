//! Grid and sweep orchestration. Cells of one replicate share corrupted
//! data and imputer trainings (cached per axis option); distinct cells may
//! run concurrently, and results are assembled in (image, factor, seed)
//! order regardless of completion order.

use std::collections::HashMap;

use rayon::prelude::*;

use super::config::{FactorImputerKind, HarnessConfig, ImageImputerKind, SweepAxis};
use super::pipeline::{
    attach_p_values, complete_factors, complete_images, conditioning_completion, evaluate_cell,
    prepare_replicate, CellOutcome, FactorCompletion, ImageCompletion, PipelineError, Replicate,
};
use crate::downstream::MetricsRow;

/// A failed cell, recorded without aborting the grid.
#[derive(Debug, Clone)]
pub struct CellFailure {
    pub image_imputer: String,
    pub factor_imputer: String,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Default)]
pub struct GridOutput {
    pub rows: Vec<MetricsRow>,
    pub failures: Vec<CellFailure>,
}

fn needs_conditioning(kind: ImageImputerKind) -> bool {
    matches!(kind, ImageImputerKind::Cpbigan | ImageImputerKind::CpbiganSharp)
}

struct ReplicateCompletions {
    rep: Replicate,
    factor: HashMap<FactorImputerKind, FactorCompletion>,
    image: HashMap<ImageImputerKind, ImageCompletion>,
}

fn prepare_completions(
    cfg: &HarnessConfig,
    seed_value: u64,
    image_kinds: &[ImageImputerKind],
    factor_kinds: &[FactorImputerKind],
) -> Result<ReplicateCompletions, PipelineError> {
    let rep = prepare_replicate(cfg, seed_value)?;

    let mut factor: HashMap<FactorImputerKind, FactorCompletion> = HashMap::new();
    for &kind in factor_kinds {
        if !factor.contains_key(&kind) {
            factor.insert(kind, complete_factors(cfg, &rep, kind)?);
        }
    }

    let conditioning = if image_kinds.iter().any(|&k| needs_conditioning(k)) {
        Some(conditioning_completion(cfg, &rep)?)
    } else {
        None
    };

    let mut image: HashMap<ImageImputerKind, ImageCompletion> = HashMap::new();
    for &kind in image_kinds {
        if image.contains_key(&kind) {
            continue;
        }
        let completion = if needs_conditioning(kind) {
            complete_images(cfg, &rep, kind, conditioning.as_ref().expect("prepared above"))?
        } else {
            // unconditional imputers ignore the factor views; pass any
            let placeholder = factor
                .values()
                .next()
                .cloned()
                .unwrap_or_else(|| FactorCompletion {
                    train: rep.corrupt_train.clone(),
                    val: rep.corrupt_val.clone(),
                    test: rep.corrupt_test.clone(),
                    chosen_lambda: None,
                    artifacts: None,
                });
            complete_images(cfg, &rep, kind, &placeholder)?
        };
        image.insert(kind, completion);
    }

    Ok(ReplicateCompletions { rep, factor, image })
}

/// Run the full imputer grid: one row per (image imputer, factor imputer,
/// seed). Cell failures are recorded and the grid continues. P-values are
/// paired bootstrap tests against the pbigan/pbigan cell when present.
pub fn run_grid(cfg: &HarnessConfig) -> Result<GridOutput, PipelineError> {
    let cells: Vec<(ImageImputerKind, FactorImputerKind)> = cfg
        .grid_image_imputers
        .iter()
        .flat_map(|&im| {
            cfg.grid_factor_imputers
                .iter()
                .filter_map(move |&fa| {
                    if im == ImageImputerKind::None && fa == FactorImputerKind::None {
                        None
                    } else {
                        Some((im, fa))
                    }
                })
        })
        .collect();

    let replicate_results: Vec<Result<(Vec<MetricsRow>, Vec<CellFailure>), PipelineError>> = cfg
        .grid_seeds
        .par_iter()
        .map(|&seed_value| {
            let prep = prepare_completions(
                cfg,
                seed_value,
                &cfg.grid_image_imputers,
                &cfg.grid_factor_imputers,
            )?;
            let mut outcomes: Vec<CellOutcome> = Vec::new();
            let mut failures: Vec<CellFailure> = Vec::new();
            let cell_results: Vec<Result<CellOutcome, (String, String, String)>> = cells
                .par_iter()
                .map(|&(im, fa)| {
                    evaluate_cell(cfg, &prep.rep, im, fa, &prep.image[&im], &prep.factor[&fa])
                        .map_err(|e| {
                            (im.as_str().to_string(), fa.as_str().to_string(), e.to_string())
                        })
                })
                .collect();
            for res in cell_results {
                match res {
                    Ok(outcome) => outcomes.push(outcome),
                    Err((im, fa, msg)) => failures.push(CellFailure {
                        image_imputer: im,
                        factor_imputer: fa,
                        seed: seed_value,
                        error: msg,
                    }),
                }
            }
            attach_p_values(
                cfg,
                &prep.rep,
                &mut outcomes,
                (ImageImputerKind::Pbigan, FactorImputerKind::Pbigan),
            )?;
            Ok((outcomes.into_iter().map(|c| c.row).collect(), failures))
        })
        .collect();

    let mut out = GridOutput::default();
    for res in replicate_results {
        let (rows, failures) = res?;
        out.rows.extend(rows);
        out.failures.extend(failures);
    }
    sort_rows(&mut out.rows);
    Ok(out)
}

/// Deterministic row order: image imputer, factor imputer, rates, seed.
pub fn sort_rows(rows: &mut [MetricsRow]) {
    rows.sort_by(|a, b| {
        (
            &a.image_imputer,
            &a.factor_imputer,
        )
            .cmp(&(&b.image_imputer, &b.factor_imputer))
            .then(a.factor_rate.partial_cmp(&b.factor_rate).unwrap())
            .then(a.tp1_rate.partial_cmp(&b.tp1_rate).unwrap())
            .then(a.seed.cmp(&b.seed))
    });
}

/// Run a missing-rate sweep along one axis with the other modality fully
/// observed. Each (method, rate, seed) produces two rows: the full
/// two-path model, and the single-path model that uses only the imputed
/// modality ("none" on the other axis). At rate 0 no imputation is invoked
/// and every method shares the fully-observed result.
pub fn run_sweep(cfg: &HarnessConfig, axis: SweepAxis, rates: &[f64]) -> Result<GridOutput, PipelineError> {
    if !rates.contains(&0.0) {
        return Err(PipelineError::Other("sweep rates must include 0.0".into()));
    }
    let jobs: Vec<(f64, u64)> = rates
        .iter()
        .flat_map(|&r| cfg.grid_seeds.iter().map(move |&s| (r, s)))
        .collect();

    let results: Vec<Result<(Vec<MetricsRow>, Vec<CellFailure>), PipelineError>> = jobs
        .par_iter()
        .map(|&(rate, seed_value)| {
            let mut sub = cfg.clone();
            match axis {
                SweepAxis::FactorRate => {
                    sub.missing_factor_rate = rate;
                    sub.missing_tp1_rate = 0.0;
                }
                SweepAxis::Tp1Rate => {
                    sub.missing_tp1_rate = rate;
                    sub.missing_factor_rate = 0.0;
                }
            }
            let mut rows = Vec::new();
            let mut failures = Vec::new();
            if rate == 0.0 {
                // no imputation invoked: evaluate the fully observed cells
                // once and emit the same row for every method.
                let prep = prepare_completions(
                    &sub,
                    seed_value,
                    &[ImageImputerKind::Observed, ImageImputerKind::None],
                    &[FactorImputerKind::Observed, FactorImputerKind::None],
                )?;
                for (im, fa) in sweep_cells(axis, "observed") {
                    match evaluate_cell(&sub, &prep.rep, im, fa, &prep.image[&im], &prep.factor[&fa]) {
                        Ok(outcome) => {
                            for method in &cfg.sweep_methods {
                                let mut row = outcome.row.clone();
                                match axis {
                                    SweepAxis::FactorRate => {
                                        if row.factor_imputer == "observed" {
                                            row.factor_imputer = method.clone();
                                        }
                                    }
                                    SweepAxis::Tp1Rate => {
                                        if row.image_imputer == "observed" {
                                            row.image_imputer = method.clone();
                                        }
                                    }
                                }
                                rows.push(row);
                            }
                        }
                        Err(e) => failures.push(CellFailure {
                            image_imputer: im.as_str().into(),
                            factor_imputer: fa.as_str().into(),
                            seed: seed_value,
                            error: e.to_string(),
                        }),
                    }
                }
                return Ok((rows, failures));
            }

            for method in &cfg.sweep_methods {
                let (image_kinds, factor_kinds): (Vec<ImageImputerKind>, Vec<FactorImputerKind>) =
                    match axis {
                        SweepAxis::FactorRate => (
                            vec![ImageImputerKind::Observed, ImageImputerKind::None],
                            vec![FactorImputerKind::parse(method).ok_or_else(|| {
                                PipelineError::Other(format!("method {method} not a factor imputer"))
                            })?],
                        ),
                        SweepAxis::Tp1Rate => (
                            vec![ImageImputerKind::parse(method).ok_or_else(|| {
                                PipelineError::Other(format!("method {method} not an image imputer"))
                            })?],
                            vec![FactorImputerKind::Observed, FactorImputerKind::None],
                        ),
                    };
                let prep = prepare_completions(&sub, seed_value, &image_kinds, &factor_kinds)?;
                for (im, fa) in sweep_cells(axis, method) {
                    match evaluate_cell(&sub, &prep.rep, im, fa, &prep.image[&im], &prep.factor[&fa]) {
                        Ok(outcome) => rows.push(outcome.row),
                        Err(e) => failures.push(CellFailure {
                            image_imputer: im.as_str().into(),
                            factor_imputer: fa.as_str().into(),
                            seed: seed_value,
                            error: e.to_string(),
                        }),
                    }
                }
            }
            Ok((rows, failures))
        })
        .collect();

    let mut out = GridOutput::default();
    for res in results {
        let (rows, failures) = res?;
        out.rows.extend(rows);
        out.failures.extend(failures);
    }
    sort_rows(&mut out.rows);
    Ok(out)
}

/// The (image, factor) cells evaluated per sweep point: the full model and
/// the single-path model of the swept modality.
fn sweep_cells(axis: SweepAxis, method: &str) -> Vec<(ImageImputerKind, FactorImputerKind)> {
    match axis {
        SweepAxis::FactorRate => {
            let fa = FactorImputerKind::parse(method).expect("validated");
            vec![
                (ImageImputerKind::Observed, fa),
                (ImageImputerKind::None, fa),
            ]
        }
        SweepAxis::Tp1Rate => {
            let im = ImageImputerKind::parse(method).expect("validated");
            vec![
                (im, FactorImputerKind::Observed),
                (im, FactorImputerKind::None),
            ]
        }
    }
}
