//! The per-replicate experiment pipeline: corrupt, complete each modality
//! with the selected imputer, train the risk model, score.
//!
//! Derived-seed discipline: every stochastic stage derives its seed from
//! (global seed, replicate seed, stage label), so any cell re-run in
//! isolation reproduces its grid result exactly, and cells sharing an
//! imputer share its training bit-for-bit.

use std::collections::HashMap;

use ndarray::Array2;
use thiserror::Error;

use super::config::{FactorImputerKind, HarnessConfig, ImageImputerKind};
use crate::adversarial::{
    impute_factors, impute_image_tp1, train_factor_gan, train_image_gan, AdversarialBundle,
    BundleConfig, GanError, GanMode, GanTrainConfig, TargetModality,
};
use crate::baseline::{
    locf_images, mean_impute, observed_column_means, soft_impute_merged, BaselineError,
    SoftImputeConfig,
};
use crate::data::{Dataset, MissingMask, MultiModalRecord, FACTOR_COUNT};
use crate::diff::layers::Affine;
use crate::diff::loss::ce_loss;
use crate::diff::{AdamConfig, BoundParams, ParamSet, Tape};
use crate::downstream::{
    auc, bootstrap_pvalue, score_records, train_mlm, DownstreamError, MetricsRow, MlmMode,
    MlmTrainConfig,
};
use crate::missingness::{corrupt_factors, drop_tp1, MechanismSpec, MissingnessError};
use crate::rng::{derive_seed, derive_seed_index};
use crate::synthgen::{make_dataset, GenError, GeneratorConfig};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Missing(#[from] MissingnessError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Gan(#[from] GanError),
    #[error(transparent)]
    Downstream(#[from] DownstreamError),
    #[error("pipeline: {0}")]
    Other(String),
}

/// Clean and corrupted splits of one replicate.
#[derive(Debug, Clone)]
pub struct Replicate {
    pub clean_train: Dataset,
    pub clean_val: Dataset,
    pub clean_test: Dataset,
    pub corrupt_train: Vec<MultiModalRecord>,
    pub corrupt_val: Vec<MultiModalRecord>,
    pub corrupt_test: Vec<MultiModalRecord>,
    pub replicate_seed: u64,
    pub seed_value: u64,
}

fn mechanism_spec(cfg: &HarnessConfig, seed: u64) -> MechanismSpec {
    MechanismSpec {
        kind: cfg.missing_mechanism,
        rate: cfg.missing_factor_rate,
        driver_index: Some(cfg.missing_driver_index),
        slope: cfg.missing_slope,
        seed,
    }
}

/// Generate the cohort (shared across replicates via the generator seed)
/// and corrupt it with this replicate's derived seeds.
pub fn prepare_replicate(cfg: &HarnessConfig, seed_value: u64) -> Result<Replicate, PipelineError> {
    let gen_cfg = GeneratorConfig {
        n: cfg.generator_n,
        class_balance: cfg.generator_class_balance,
        noise_scale: cfg.generator_noise_scale,
        signal_strength: cfg.generator_signal_strength,
        seed: cfg.run_seed,
    };
    let (train, val, test) = make_dataset(&gen_cfg)?;
    let replicate_seed = derive_seed_index(derive_seed(cfg.run_seed, "replicate"), seed_value);

    let corrupt_split = |records: &[MultiModalRecord], label: &str| -> Result<Vec<MultiModalRecord>, PipelineError> {
        let mut out: Vec<MultiModalRecord> = records.to_vec();
        if cfg.missing_tp1_rate > 0.0 {
            let seed = derive_seed(replicate_seed, &format!("corrupt-tp1/{label}"));
            out = out
                .iter()
                .map(|r| drop_tp1(cfg.missing_tp1_rate, seed, r))
                .collect::<Result<_, _>>()?;
        }
        if cfg.missing_factor_rate > 0.0 {
            let spec = mechanism_spec(cfg, derive_seed(replicate_seed, &format!("corrupt-factors/{label}")));
            corrupt_factors(&mut out, &spec)?;
        }
        Ok(out)
    };

    Ok(Replicate {
        corrupt_train: corrupt_split(&train.records, "train")?,
        corrupt_val: corrupt_split(&val.records, "validation")?,
        corrupt_test: corrupt_split(&test.records, "test")?,
        clean_train: train,
        clean_val: val,
        clean_test: test,
        replicate_seed,
        seed_value,
    })
}

/// Trained adversarial imputer plus its loss curves, for callers that
/// persist checkpoints.
#[derive(Debug, Clone)]
pub struct GanArtifacts {
    pub bundle: AdversarialBundle,
    pub curves: Vec<crate::adversarial::CurveRow>,
}

/// Completed factor values for the three splits, in record order.
#[derive(Debug, Clone)]
pub struct FactorCompletion {
    pub train: Vec<MultiModalRecord>,
    pub val: Vec<MultiModalRecord>,
    pub test: Vec<MultiModalRecord>,
    /// Soft-impute lambda chosen on validation AUC, when applicable.
    pub chosen_lambda: Option<f64>,
    /// Present when an adversarial imputer was trained.
    pub artifacts: Option<GanArtifacts>,
}

fn gan_train_config(cfg: &HarnessConfig, seed: u64, fake_mask_rate: f64) -> GanTrainConfig {
    GanTrainConfig {
        adam: AdamConfig::default().with_lr(cfg.gan_lr),
        batch: cfg.gan_batch,
        epochs: cfg.gan_epochs,
        probe_every: cfg.gan_probe_every,
        seed,
        fake_mask_rate,
    }
}

fn bundle_config(
    cfg: &HarnessConfig,
    mode: GanMode,
    target: TargetModality,
    seed: u64,
) -> BundleConfig {
    BundleConfig {
        mode,
        target,
        d_za: cfg.d_z,
        d_zb: cfg.d_z,
        lambda_rec: cfg.lambda_rec as f32,
        lambda_ce: cfg.lambda_ce as f32,
        ablate_conditional: false,
        seed,
    }
}

/// Replace factor vectors of `base` with completions taken from `completed`
/// (matched by position; both views come from the same corrupted source).
fn graft_factors(base: &[MultiModalRecord], completed: &[MultiModalRecord]) -> Vec<MultiModalRecord> {
    base.iter()
        .zip(completed)
        .map(|(b, c)| {
            debug_assert_eq!(b.id, c.id);
            let mut out = b.clone();
            out.factors = c.factors.clone();
            out
        })
        .collect()
}

/// Soft-impute lambda selection: logistic probe on completed train factors,
/// scored on completed validation factors.
fn probe_auc_on_factors(
    train: &[MultiModalRecord],
    val: &[MultiModalRecord],
    seed: u64,
) -> Result<f64, PipelineError> {
    let to_xy = |records: &[MultiModalRecord]| {
        let mut x = Array2::<f32>::zeros((records.len(), FACTOR_COUNT));
        let mut y = Vec::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            for j in 0..FACTOR_COUNT {
                x[[i, j]] = r.factors.values[j];
            }
            y.push(r.label);
        }
        (x, y)
    };
    let (tx, ty) = to_xy(train);
    let (vx, vy) = to_xy(val);
    let labels: Vec<usize> = ty.iter().map(|&l| usize::from(l)).collect();
    let mut ps = ParamSet::<f32>::new();
    let head = Affine::init(&mut ps, "lambda-probe", FACTOR_COUNT, 2, seed);
    let adam = AdamConfig::default().with_lr(0.05);
    for t in 1..=150u64 {
        let tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&tape, &ps);
        let logits = head
            .forward(&bp, tape.leaf(tx.clone().into_dyn()))
            .map_err(|e| PipelineError::Other(e.to_string()))?;
        let loss = ce_loss(logits, &labels);
        let grads = tape.backward(loss);
        let gmap = bp.collect_grads(&grads, &ps);
        ps.adam_step(&gmap, &adam, t)
            .map_err(|e| PipelineError::Other(e.to_string()))?;
    }
    let tape = Tape::<f32>::new();
    let bp = BoundParams::bind(&tape, &ps);
    let logits = head
        .forward(&bp, tape.leaf(vx.clone().into_dyn()))
        .map_err(|e| PipelineError::Other(e.to_string()))?;
    let v = logits.value();
    let scores: Vec<f64> = (0..vx.nrows()).map(|i| f64::from(v[[i, 1]] - v[[i, 0]])).collect();
    Ok(auc(&scores, &vy)?)
}

/// Complete factors on all three splits with the selected imputer.
/// Adversarial imputers train on the corrupted train split; soft-impute is
/// transductive over the stacked splits with labels excluded.
pub fn complete_factors(
    cfg: &HarnessConfig,
    rep: &Replicate,
    kind: FactorImputerKind,
) -> Result<FactorCompletion, PipelineError> {
    let seed = derive_seed(rep.replicate_seed, &format!("imputer/factor/{}", kind.as_str()));
    let pass_through = |src: &[MultiModalRecord]| src.to_vec();
    match kind {
        FactorImputerKind::None => Ok(FactorCompletion {
            train: pass_through(&rep.corrupt_train),
            val: pass_through(&rep.corrupt_val),
            test: pass_through(&rep.corrupt_test),
            chosen_lambda: None,
            artifacts: None,
        }),
        FactorImputerKind::Observed => Ok(FactorCompletion {
            // observed = the uncorrupted factor modality grafted onto the
            // (possibly image-corrupted) records
            train: graft_factors(&rep.corrupt_train, &rep.clean_train.records),
            val: graft_factors(&rep.corrupt_val, &rep.clean_val.records),
            test: graft_factors(&rep.corrupt_test, &rep.clean_test.records),
            chosen_lambda: None,
            artifacts: None,
        }),
        FactorImputerKind::Mean => {
            let rows: Vec<Vec<f32>> = rep.corrupt_train.iter().map(|r| r.factors.values.clone()).collect();
            let masks: Vec<Vec<u8>> = rep.corrupt_train.iter().map(|r| r.factors.mask.clone()).collect();
            let means = observed_column_means(&rows, &masks)?;
            let fill = |src: &[MultiModalRecord]| -> Result<Vec<MultiModalRecord>, PipelineError> {
                src.iter()
                    .map(|r| Ok(mean_impute(&means, r)?.record))
                    .collect()
            };
            Ok(FactorCompletion {
                train: fill(&rep.corrupt_train)?,
                val: fill(&rep.corrupt_val)?,
                test: fill(&rep.corrupt_test)?,
                chosen_lambda: None,
                artifacts: None,
            })
        }
        FactorImputerKind::SoftImpute => {
            let all: Vec<&MultiModalRecord> = rep
                .corrupt_train
                .iter()
                .chain(&rep.corrupt_val)
                .chain(&rep.corrupt_test)
                .collect();
            let n = all.len();
            let mut m = Array2::<f64>::zeros((n, FACTOR_COUNT));
            let mut bits = Vec::with_capacity(n * FACTOR_COUNT);
            for (i, r) in all.iter().enumerate() {
                for j in 0..FACTOR_COUNT {
                    m[[i, j]] = f64::from(r.factors.values[j]) * f64::from(r.factors.mask[j]);
                    bits.push(r.factors.mask[j]);
                }
            }
            let mask = MissingMask {
                entries: ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(&[n, FACTOR_COUNT]), bits)
                    .unwrap(),
            };
            let mut best: Option<(f64, f64, Vec<MultiModalRecord>, Vec<MultiModalRecord>, Vec<MultiModalRecord>)> = None;
            for &lambda in &cfg.soft_impute_lambda_grid {
                let si_cfg = SoftImputeConfig {
                    lambda,
                    tol: cfg.soft_impute_tol,
                    max_iter: cfg.soft_impute_max_iter,
                };
                let x = soft_impute_merged(&m, &mask, &si_cfg)?;
                let apply = |src: &[MultiModalRecord], row0: usize| -> Vec<MultiModalRecord> {
                    src.iter()
                        .enumerate()
                        .map(|(i, r)| {
                            let mut out = r.clone();
                            for j in 0..FACTOR_COUNT {
                                if out.factors.mask[j] == 0 {
                                    out.factors.values[j] = x[[row0 + i, j]].clamp(0.0, 1.0) as f32;
                                }
                                out.factors.mask[j] = 1;
                            }
                            out
                        })
                        .collect()
                };
                let train = apply(&rep.corrupt_train, 0);
                let val = apply(&rep.corrupt_val, rep.corrupt_train.len());
                let test = apply(
                    &rep.corrupt_test,
                    rep.corrupt_train.len() + rep.corrupt_val.len(),
                );
                let score = probe_auc_on_factors(&train, &val, derive_seed(seed, "lambda-probe"))?;
                if best.as_ref().map(|(b, _, _, _, _)| score > *b).unwrap_or(true) {
                    best = Some((score, lambda, train, val, test));
                }
            }
            let (_, lambda, train, val, test) =
                best.ok_or_else(|| PipelineError::Other("empty lambda grid".into()))?;
            Ok(FactorCompletion {
                train,
                val,
                test,
                chosen_lambda: Some(lambda),
                artifacts: None,
            })
        }
        FactorImputerKind::Pbigan | FactorImputerKind::Cpbigan => {
            let mode = if kind == FactorImputerKind::Pbigan {
                GanMode::Pbigan
            } else {
                GanMode::Cpbigan
            };
            let mut bundle = AdversarialBundle::init(bundle_config(
                cfg,
                mode,
                TargetModality::Factors,
                derive_seed(seed, "init"),
            ))?;
            let tcfg = gan_train_config(cfg, derive_seed(seed, "train"), cfg.missing_factor_rate);
            let train_out = train_factor_gan(&mut bundle, &rep.corrupt_train, &rep.corrupt_val, &tcfg)?;
            let fill = |src: &[MultiModalRecord]| -> Result<Vec<MultiModalRecord>, PipelineError> {
                src.iter()
                    .map(|r| Ok(impute_factors(&bundle, r)?.record))
                    .collect()
            };
            let train = fill(&rep.corrupt_train)?;
            let val = fill(&rep.corrupt_val)?;
            let test = fill(&rep.corrupt_test)?;
            Ok(FactorCompletion {
                train,
                val,
                test,
                chosen_lambda: None,
                artifacts: Some(GanArtifacts {
                    curves: train_out.curves,
                    bundle,
                }),
            })
        }
    }
}

/// Completed image modality (per split), carrying the factor views used for
/// conditioning so callers can reuse them.
#[derive(Debug, Clone)]
pub struct ImageCompletion {
    pub train: Vec<MultiModalRecord>,
    pub val: Vec<MultiModalRecord>,
    pub test: Vec<MultiModalRecord>,
    /// Present when an adversarial imputer was trained.
    pub artifacts: Option<GanArtifacts>,
}

fn factor_map(records: &[MultiModalRecord]) -> HashMap<u32, Vec<f32>> {
    records.iter().map(|r| (r.id, r.factors.values.clone())).collect()
}

/// Complete the image modality. Conditional imputers condition on
/// `conditioning`, a factor completion that must be fully observed (the
/// conditional-modality contract).
pub fn complete_images(
    cfg: &HarnessConfig,
    rep: &Replicate,
    kind: ImageImputerKind,
    conditioning: &FactorCompletion,
) -> Result<ImageCompletion, PipelineError> {
    let seed = derive_seed(rep.replicate_seed, &format!("imputer/image/{}", kind.as_str()));
    match kind {
        ImageImputerKind::None => Ok(ImageCompletion {
            train: rep.corrupt_train.clone(),
            val: rep.corrupt_val.clone(),
            test: rep.corrupt_test.clone(),
            artifacts: None,
        }),
        ImageImputerKind::Observed => {
            let graft = |base: &[MultiModalRecord], clean: &[MultiModalRecord]| {
                base.iter()
                    .zip(clean)
                    .map(|(b, c)| {
                        let mut out = b.clone();
                        out.images = c.images.clone();
                        out
                    })
                    .collect()
            };
            Ok(ImageCompletion {
                train: graft(&rep.corrupt_train, &rep.clean_train.records),
                val: graft(&rep.corrupt_val, &rep.clean_val.records),
                test: graft(&rep.corrupt_test, &rep.clean_test.records),
                artifacts: None,
            })
        }
        ImageImputerKind::Locf => {
            let fill = |src: &[MultiModalRecord]| -> Result<Vec<MultiModalRecord>, PipelineError> {
                src.iter().map(|r| Ok(locf_images(r)?.record)).collect()
            };
            Ok(ImageCompletion {
                train: fill(&rep.corrupt_train)?,
                val: fill(&rep.corrupt_val)?,
                test: fill(&rep.corrupt_test)?,
                artifacts: None,
            })
        }
        ImageImputerKind::Pbigan | ImageImputerKind::Cpbigan | ImageImputerKind::CpbiganSharp => {
            let mode = match kind {
                ImageImputerKind::Pbigan => GanMode::Pbigan,
                ImageImputerKind::Cpbigan => GanMode::Cpbigan,
                _ => GanMode::CpbiganSharp,
            };
            let mut bundle = AdversarialBundle::init(bundle_config(
                cfg,
                mode,
                TargetModality::ImageTp1,
                derive_seed(seed, "init"),
            ))?;
            // Image fake masks are complete: the limiting case trains on
            // complete samples and generates whole patches.
            let tcfg = gan_train_config(cfg, derive_seed(seed, "train"), 0.0);
            let cond_train = factor_map(&conditioning.train);
            let cond_val = factor_map(&conditioning.val);
            let cond_test = factor_map(&conditioning.test);
            let train_out = train_image_gan(
                &mut bundle,
                &rep.corrupt_train,
                &rep.corrupt_val,
                &cond_train,
                &tcfg,
            )?;
            let noise_base = derive_seed(seed, "noise");
            let fill = |src: &[MultiModalRecord],
                        cond: &HashMap<u32, Vec<f32>>|
             -> Result<Vec<MultiModalRecord>, PipelineError> {
                src.iter()
                    .map(|r| {
                        if r.images.tp1_present {
                            return Ok(r.clone());
                        }
                        let factors = crate::data::FactorVector::fully_observed(
                            cond.get(&r.id)
                                .cloned()
                                .unwrap_or_else(|| r.factors.values.clone()),
                        );
                        Ok(impute_image_tp1(
                            &bundle,
                            r,
                            &factors,
                            derive_seed_index(noise_base, u64::from(r.id)),
                        )?
                        .record)
                    })
                    .collect()
            };
            let train = fill(&rep.corrupt_train, &cond_train)?;
            let val = fill(&rep.corrupt_val, &cond_val)?;
            let test = fill(&rep.corrupt_test, &cond_test)?;
            Ok(ImageCompletion {
                train,
                val,
                test,
                artifacts: Some(GanArtifacts {
                    curves: train_out.curves,
                    bundle,
                }),
            })
        }
    }
}

/// The conditioning completion used by conditional image imputers: the
/// observed factors when factors are uncorrupted, else the conditional
/// adversarial factor completion.
pub fn conditioning_completion(
    cfg: &HarnessConfig,
    rep: &Replicate,
) -> Result<FactorCompletion, PipelineError> {
    if cfg.missing_factor_rate == 0.0 {
        complete_factors(cfg, rep, FactorImputerKind::Observed)
    } else {
        complete_factors(cfg, rep, FactorImputerKind::Cpbigan)
    }
}

/// Merge modality views into cell records: images from the image
/// completion, factors from the factor completion.
pub fn assemble_cell_records(
    images: &[MultiModalRecord],
    factors: &[MultiModalRecord],
) -> Vec<MultiModalRecord> {
    images
        .iter()
        .zip(factors)
        .map(|(im, fa)| {
            debug_assert_eq!(im.id, fa.id);
            let mut out = im.clone();
            out.factors = fa.factors.clone();
            out
        })
        .collect()
}

pub fn cell_mode(image: ImageImputerKind, factor: FactorImputerKind) -> Result<MlmMode, PipelineError> {
    match (image == ImageImputerKind::None, factor == FactorImputerKind::None) {
        (true, true) => Err(PipelineError::Other(
            "a cell cannot ablate both modalities".into(),
        )),
        (true, false) => Ok(MlmMode::FactorOnly),
        (false, true) => Ok(MlmMode::ImageOnly),
        (false, false) => Ok(MlmMode::Full),
    }
}

/// Scores and AUC of one grid cell.
pub struct CellOutcome {
    pub row: MetricsRow,
    pub test_scores: Vec<f64>,
    pub test_labels: Vec<u8>,
}

/// Train and evaluate the downstream model of one cell given completed
/// modality views.
pub fn evaluate_cell(
    cfg: &HarnessConfig,
    rep: &Replicate,
    image_kind: ImageImputerKind,
    factor_kind: FactorImputerKind,
    images: &ImageCompletion,
    factors: &FactorCompletion,
) -> Result<CellOutcome, PipelineError> {
    let mode = cell_mode(image_kind, factor_kind)?;
    let train = assemble_cell_records(&images.train, &factors.train);
    let val = assemble_cell_records(&images.val, &factors.val);
    let test = assemble_cell_records(&images.test, &factors.test);
    let mlm_seed = derive_seed(
        rep.replicate_seed,
        &format!("mlm/{}/{}", image_kind.as_str(), factor_kind.as_str()),
    );
    let tcfg = MlmTrainConfig {
        adam: AdamConfig::default().with_lr(cfg.mlm_lr),
        batch: cfg.mlm_batch,
        epochs: cfg.mlm_epochs,
        mode,
        seed: mlm_seed,
    };
    let out = train_mlm(&train, &val, &tcfg)?;
    let scores = score_records(&out.model, &test)?;
    let labels: Vec<u8> = test.iter().map(|r| r.label).collect();
    let cell_auc = auc(&scores, &labels)?;
    Ok(CellOutcome {
        row: MetricsRow {
            image_imputer: image_kind.as_str().to_string(),
            factor_imputer: factor_kind.as_str().to_string(),
            mechanism: cfg.missing_mechanism.as_str().to_string(),
            factor_rate: cfg.missing_factor_rate,
            tp1_rate: cfg.missing_tp1_rate,
            seed: rep.seed_value,
            auc: cell_auc,
            p_value: None,
        },
        test_scores: scores,
        test_labels: labels,
    })
}

/// Run one cell in isolation (corrupts and trains everything it needs).
/// Used to verify cell independence and by the `impute`/`train` CLI path.
pub fn run_single_cell(
    cfg: &HarnessConfig,
    seed_value: u64,
    image_kind: ImageImputerKind,
    factor_kind: FactorImputerKind,
) -> Result<CellOutcome, PipelineError> {
    let rep = prepare_replicate(cfg, seed_value)?;
    let factors = complete_factors(cfg, &rep, factor_kind)?;
    let needs_conditioning = matches!(
        image_kind,
        ImageImputerKind::Cpbigan | ImageImputerKind::CpbiganSharp
    );
    let images = if needs_conditioning {
        let conditioning = conditioning_completion(cfg, &rep)?;
        complete_images(cfg, &rep, image_kind, &conditioning)?
    } else {
        complete_images(cfg, &rep, image_kind, &factors)?
    };
    evaluate_cell(cfg, &rep, image_kind, factor_kind, &images, &factors)
}

/// Paired bootstrap p-values against a reference cell's scores.
pub fn attach_p_values(
    cfg: &HarnessConfig,
    rep: &Replicate,
    cells: &mut [CellOutcome],
    reference: (ImageImputerKind, FactorImputerKind),
) -> Result<(), PipelineError> {
    let ref_scores = cells
        .iter()
        .find(|c| {
            c.row.image_imputer == reference.0.as_str()
                && c.row.factor_imputer == reference.1.as_str()
        })
        .map(|c| c.test_scores.clone());
    let Some(ref_scores) = ref_scores else {
        return Ok(());
    };
    for cell in cells.iter_mut() {
        if cell.row.image_imputer == reference.0.as_str()
            && cell.row.factor_imputer == reference.1.as_str()
        {
            continue;
        }
        let seed = derive_seed(
            rep.replicate_seed,
            &format!("bootstrap/{}/{}", cell.row.image_imputer, cell.row.factor_imputer),
        );
        cell.row.p_value = Some(bootstrap_pvalue(
            &cell.test_scores,
            &ref_scores,
            &cell.test_labels,
            cfg.bootstrap_n,
            seed,
        )?);
    }
    Ok(())
}
