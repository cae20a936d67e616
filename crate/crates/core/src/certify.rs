//! Gradient certification: every objective used by a training loop is
//! checked against central finite differences in f64 — the adversarial
//! discriminator/generator objectives of both model families, the class
//! regularizer, the reconstruction term, and the downstream risk-model
//! loss.

use ndarray::{ArrayD, IxDyn};

use crate::adversarial::losses::{convert_factor_batch, convert_image_batch};
use crate::adversarial::{
    build_factor_gan, build_image_gan, AdversarialBundle, BundleConfig, FactorBatch, GanError,
    GanMode, ImageBatch, TargetModality,
};
use crate::data::{FACTOR_COUNT, IMG_SIZE};
use crate::diff::{grad_check, GradCheckConfig, GradCheckReport, ParamSet};
use crate::downstream::{init_mlm, mlm_loss_builder, MlmMode};
use crate::rng::CounterRng;

/// One certified objective.
#[derive(Debug)]
pub struct CertEntry {
    pub name: String,
    pub report: GradCheckReport,
}

fn rand_arr(rng: &CounterRng, counter: &mut u64, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f32> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            *counter += 1;
            (lo + (hi - lo) * rng.uniform_at(*counter)) as f32
        })
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
}

fn factor_batch(seed: u64, bsz: usize, d_za: usize, with_image: bool) -> FactorBatch<f32> {
    let rng = CounterRng::new(seed);
    let mut c = 0u64;
    FactorBatch {
        x: rand_arr(&rng, &mut c, &[bsz, FACTOR_COUNT], 0.0, 1.0),
        mask: rand_arr(&rng, &mut c, &[bsz, FACTOR_COUNT], 0.0, 1.0).mapv(|v| f32::from(v > 0.3)),
        cond_image: with_image.then(|| rand_arr(&rng, &mut c, &[bsz, 1, IMG_SIZE, IMG_SIZE], 0.0, 1.0)),
        noise: rand_arr(&rng, &mut c, &[bsz, d_za], -1.0, 1.0),
        fake_mask: rand_arr(&rng, &mut c, &[bsz, FACTOR_COUNT], 0.0, 1.0).mapv(|v| f32::from(v > 0.3)),
        labels: (0..bsz).map(|i| i % 2).collect(),
    }
}

fn image_batch(seed: u64, bsz: usize, d_za: usize, with_factors: bool) -> ImageBatch<f32> {
    let rng = CounterRng::new(seed);
    let mut c = 0u64;
    ImageBatch {
        x_tp1: rand_arr(&rng, &mut c, &[bsz, 1, IMG_SIZE, IMG_SIZE], 0.0, 1.0),
        background: rand_arr(&rng, &mut c, &[bsz, 1, IMG_SIZE, IMG_SIZE], 0.0, 1.0),
        cond_factors: with_factors.then(|| rand_arr(&rng, &mut c, &[bsz, FACTOR_COUNT], 0.0, 1.0)),
        noise: rand_arr(&rng, &mut c, &[bsz, d_za], -1.0, 1.0),
        labels: (0..bsz).map(|i| i % 2).collect(),
    }
}

fn merged_params(bundle: &AdversarialBundle) -> ParamSet<f64> {
    let mut all = ParamSet::<f32>::new();
    for (_, ps) in bundle.sections() {
        all.absorb(ps);
    }
    all.convert::<f64>()
}

/// Small bundles keep the finite-difference passes fast while exercising
/// the full topology.
fn small_bundle(mode: GanMode, target: TargetModality, seed: u64) -> AdversarialBundle {
    AdversarialBundle::init(BundleConfig {
        d_za: 8,
        d_zb: 8,
        ..BundleConfig::new(mode, target, seed)
    })
    .expect("valid config")
}

fn check_factor_objective(
    name: &str,
    mode: GanMode,
    seed: u64,
    cfg: &GradCheckConfig,
    pick: impl for<'t> Fn(
        crate::adversarial::GanGraph<'t, f64>,
    ) -> Result<crate::diff::Var<'t, f64>, GanError>,
) -> CertEntry {
    let bundle = small_bundle(mode, TargetModality::Factors, seed);
    let batch = convert_factor_batch::<f64>(&factor_batch(seed, 3, 8, mode.conditional()));
    let params = merged_params(&bundle);
    let report = grad_check(
        &params,
        |tape, bp| {
            let g = build_factor_gan(&bundle, bp, tape, &batch)
                .map_err(|e| crate::diff::DiffError::Shape(e.to_string()))?;
            pick(g).map_err(|e| crate::diff::DiffError::Shape(e.to_string()))
        },
        cfg,
    )
    .expect("grad check runs");
    CertEntry {
        name: name.to_string(),
        report,
    }
}

fn check_image_objective(name: &str, mode: GanMode, seed: u64, cfg: &GradCheckConfig) -> CertEntry {
    let bundle = small_bundle(mode, TargetModality::ImageTp1, seed);
    let batch = convert_image_batch::<f64>(&image_batch(seed, 2, 8, mode.conditional()));
    let params = merged_params(&bundle);
    let report = grad_check(
        &params,
        |tape, bp| {
            let g = build_image_gan(&bundle, bp, tape, &batch)
                .map_err(|e| crate::diff::DiffError::Shape(e.to_string()))?;
            Ok(g.g_objective)
        },
        cfg,
    )
    .expect("grad check runs");
    CertEntry {
        name: name.to_string(),
        report,
    }
}

fn check_mlm(seed: u64, cfg: &GradCheckConfig) -> CertEntry {
    let model32 = init_mlm(MlmMode::Full, seed);
    let params = model32.params.convert::<f64>();
    let rng = CounterRng::new(seed ^ 0xABCD);
    let mut c = 0u64;
    let tp0 = rand_arr(&rng, &mut c, &[2, 1, IMG_SIZE, IMG_SIZE], 0.0, 1.0).mapv(f64::from);
    let tp1 = rand_arr(&rng, &mut c, &[2, 1, IMG_SIZE, IMG_SIZE], 0.0, 1.0).mapv(f64::from);
    let fac = rand_arr(&rng, &mut c, &[2, FACTOR_COUNT], 0.0, 1.0).mapv(f64::from);
    let labels = vec![0usize, 1];
    let report = grad_check(
        &params,
        |tape, bp| mlm_loss_builder(&model32, tape, bp, &tp0, &tp1, &fac, &labels),
        cfg,
    )
    .expect("grad check runs");
    CertEntry {
        name: "mlm_full_loss".to_string(),
        report,
    }
}

/// Run the whole certification battery over the given seeds.
pub fn run_certification(seeds: &[u64], max_coords_per_tensor: usize, tol: f64) -> Vec<CertEntry> {
    let mut entries = Vec::new();
    for &seed in seeds {
        let cfg = GradCheckConfig {
            tol,
            max_coords_per_tensor,
            seed,
            ..GradCheckConfig::default()
        };
        entries.push(check_factor_objective(
            &format!("eq1_discriminator_objective[seed={seed}]"),
            GanMode::Pbigan,
            seed,
            &cfg,
            |g| Ok(g.gan_value),
        ));
        entries.push(check_factor_objective(
            &format!("eq1_generator_objective[seed={seed}]"),
            GanMode::Pbigan,
            seed,
            &cfg,
            |g| Ok(g.g_objective),
        ));
        entries.push(check_factor_objective(
            &format!("eq2_conditional_objective[seed={seed}]"),
            GanMode::Cpbigan,
            seed,
            &cfg,
            |g| Ok(g.g_objective),
        ));
        entries.push(check_factor_objective(
            &format!("eq3_class_term[seed={seed}]"),
            GanMode::Cpbigan,
            seed,
            &cfg,
            |g| {
                g.class_term
                    .ok_or_else(|| GanError::BadBundle("class term missing".into()))
            },
        ));
        entries.push(check_factor_objective(
            &format!("reconstruction_term[seed={seed}]"),
            GanMode::Cpbigan,
            seed,
            &cfg,
            |g| Ok(g.reconstruction),
        ));
        entries.push(check_image_objective(
            &format!("image_eq2_objective[seed={seed}]"),
            GanMode::Cpbigan,
            seed,
            &cfg,
        ));
        entries.push(check_mlm(seed, &cfg));
    }
    entries
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn certification_battery_passes_on_one_seed() {
        let entries = run_certification(&[5], 4, 1e-3);
        assert_eq!(entries.len(), 7);
        for e in &entries {
            assert!(e.report.passed(), "{}: {}", e.name, e.report.summary());
        }
    }
}
