//! Inference-time imputation through a trained (or untrained) bundle.

use log::warn;
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;

use super::nets::encode_factors;
use super::{AdversarialBundle, GanError, GanMode, TargetModality};
use crate::data::{
    merge_observed, FactorVector, ImagePatch, ImputationResult, MissingMask, MultiModalRecord,
    Provenance, FACTOR_COUNT, IMG_SIZE,
};
use crate::diff::{Tape, Var};
use crate::rng::stream_rng;

/// Complete the factor vector of one record. Observed entries pass through
/// the merge rule untouched; missing entries take the decoder output of the
/// joint incomplete-data code. Deterministic: the code path uses no noise.
pub fn impute_factors(
    bundle: &AdversarialBundle,
    record: &MultiModalRecord,
) -> Result<ImputationResult, GanError> {
    if bundle.cfg.target != TargetModality::Factors {
        return Err(GanError::BadBundle("bundle does not impute factors".into()));
    }
    let f = record.factors.len();
    if f != FACTOR_COUNT {
        return Err(GanError::BadInput(format!("expected {FACTOR_COUNT} factors, got {f}")));
    }
    let arch = bundle.factor_arch()?;
    let tape = Tape::<f32>::new();
    let bp = bundle.bind(&tape);

    let mut enc_in = Array2::<f32>::zeros((1, 2 * f));
    for j in 0..f {
        let m = f32::from(record.factors.mask[j]);
        enc_in[[0, j]] = record.factors.values[j] * m;
        enc_in[[0, f + j]] = m;
    }
    let z_a = encode_factors(bundle, &bp, &tape, &enc_in.into_dyn())?;

    let z = if bundle.cfg.cond_dim() > 0 {
        let z_b = match record.images.latest_available() {
            Some(patch) => {
                let img = patch
                    .pixels
                    .clone()
                    .into_shape_with_order((1, 1, IMG_SIZE, IMG_SIZE))
                    .unwrap()
                    .into_dyn();
                super::nets::encode_cond_image_public(arch, &bp, &tape, &img)?
            }
            None => {
                warn!(
                    "record {}: no image timepoint available, falling back to an \
                     unconditional (zero) conditioning code",
                    record.id
                );
                tape.leaf(ArrayD::zeros(IxDyn(&[1, bundle.cfg.d_zb])))
            }
        };
        Var::concat(1, &[z_a, z_b])
    } else {
        z_a
    };

    let decoded = super::nets::decode_factors_public(arch, &bp, z)?.value();
    let x_hat = decoded.to_shape(IxDyn(&[f])).unwrap().to_owned();
    let x = ArrayD::from_shape_vec(IxDyn(&[f]), record.factors.values.clone()).unwrap();
    let mask = MissingMask::from_vec(record.factors.mask.clone());
    let merged = merge_observed(&x, &x_hat, &mask)
        .map_err(|e| GanError::BadInput(e.to_string()))?;

    let mut out = record.clone();
    out.factors = FactorVector {
        values: merged.iter().copied().collect(),
        mask: vec![1; f],
    };
    Ok(ImputationResult {
        factor_provenance: ImputationResult::factor_tags(&record.factors.mask, Provenance::Imputed),
        tp0_provenance: Provenance::Observed,
        tp1_provenance: Provenance::Observed,
        record: out,
    })
}

/// Generate a current-timepoint patch from a background patch, completed
/// conditioning factors and a noise vector. Shared by imputation, probes
/// and tests.
pub fn generate_tp1_patch(
    bundle: &AdversarialBundle,
    background: &ImagePatch,
    factors: &FactorVector,
    noise_seed: u64,
) -> Result<ImagePatch, GanError> {
    let arch = bundle.image_arch()?;
    let tape = Tape::<f32>::new();
    let bp = bundle.bind(&tape);

    let bg = background
        .pixels
        .clone()
        .into_shape_with_order((1, 1, IMG_SIZE, IMG_SIZE))
        .unwrap()
        .into_dyn();
    // The limiting case replaces the data code with noise; only the skips
    // of the background encoder feed the decoder.
    let (_z_a, skip_vars) = super::nets::encode_image_public(arch, &bp, &tape, &bg)?;

    let mut rng = stream_rng(noise_seed, "gen-noise");
    let noise: Vec<f32> = (0..bundle.cfg.d_za)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            z as f32
        })
        .collect();
    let z_noise = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[1, bundle.cfg.d_za]), noise).unwrap());

    let z = if bundle.cfg.cond_dim() > 0 {
        let fac = ArrayD::from_shape_vec(IxDyn(&[1, FACTOR_COUNT]), factors.values.clone()).unwrap();
        let z_b = super::nets::encode_cond_factors_public(arch, &bp, &tape, &fac)?;
        Var::concat(1, &[z_noise, z_b])
    } else {
        z_noise
    };

    let x_hat = super::nets::decode_image_public(arch, &bp, z, &skip_vars)?.value();
    let pixels = x_hat
        .to_shape((1usize, IMG_SIZE, IMG_SIZE))
        .unwrap()
        .to_owned();
    Ok(ImagePatch { pixels })
}

/// Impute a wholly missing current-timepoint image (the limiting case).
/// The encoder consumes the previous timepoint — center-masked except in
/// sharp mode — and the generated patch replaces the output entirely.
pub fn impute_image_tp1(
    bundle: &AdversarialBundle,
    record: &MultiModalRecord,
    factors_complete: &FactorVector,
    noise_seed: u64,
) -> Result<ImputationResult, GanError> {
    if bundle.cfg.target != TargetModality::ImageTp1 {
        return Err(GanError::BadBundle("bundle does not impute images".into()));
    }
    if record.images.tp1_present {
        return Err(GanError::BadInput(format!(
            "record {}: tp1 already observed, nothing to impute",
            record.id
        )));
    }
    if !record.images.tp0_present {
        return Err(GanError::BadInput(format!(
            "record {}: tp0 also missing; carry forward or skip",
            record.id
        )));
    }
    if bundle.cfg.cond_dim() > 0 && !factors_complete.all_observed() {
        return Err(GanError::BadInput(format!(
            "record {}: conditioning factors must be complete",
            record.id
        )));
    }

    let background = match bundle.cfg.mode {
        GanMode::CpbiganSharp => record.images.tp0.clone(),
        _ => record.images.tp0.center_masked(),
    };
    let patch = generate_tp1_patch(bundle, &background, factors_complete, noise_seed)?;

    let mut out = record.clone();
    out.images.tp1 = patch;
    out.images.tp1_present = true;
    Ok(ImputationResult {
        factor_provenance: ImputationResult::factor_tags(&record.factors.mask, Provenance::Observed),
        tp0_provenance: Provenance::Observed,
        tp1_provenance: Provenance::Generated,
        record: out,
    })
}
