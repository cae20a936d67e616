//! f64 evaluation helpers for the adversarial objectives, used by the
//! analytic anchor checks and the gradient certification suite.

use ndarray::ArrayD;

use super::nets::{build_factor_gan, build_image_gan, FactorBatch, ImageBatch};
use super::{AdversarialBundle, GanError, TargetModality};
use crate::diff::{Real, Tape};

pub fn convert_arr<T: Real>(a: &ArrayD<f32>) -> ArrayD<T> {
    a.mapv(|x| T::from_f64(f64::from(x)))
}

pub fn convert_factor_batch<T: Real>(b: &FactorBatch<f32>) -> FactorBatch<T> {
    FactorBatch {
        x: convert_arr(&b.x),
        mask: convert_arr(&b.mask),
        cond_image: b.cond_image.as_ref().map(convert_arr),
        noise: convert_arr(&b.noise),
        fake_mask: convert_arr(&b.fake_mask),
        labels: b.labels.clone(),
    }
}

pub fn convert_image_batch<T: Real>(b: &ImageBatch<f32>) -> ImageBatch<T> {
    ImageBatch {
        x_tp1: convert_arr(&b.x_tp1),
        background: convert_arr(&b.background),
        cond_factors: b.cond_factors.as_ref().map(convert_arr),
        noise: convert_arr(&b.noise),
        labels: b.labels.clone(),
    }
}

/// Objective values on one factor batch, evaluated in f64:
/// (gan_value, g_objective, reconstruction, class term if present).
pub fn gan_objectives_value(
    bundle: &AdversarialBundle,
    batch: &FactorBatch<f32>,
) -> Result<(f64, f64, f64, Option<f64>), GanError> {
    assert_eq!(bundle.cfg.target, TargetModality::Factors);
    let batch64 = convert_factor_batch::<f64>(batch);
    let tape = Tape::<f64>::new();
    let bp = bundle.bind(&tape);
    let g = build_factor_gan(bundle, &bp, &tape, &batch64)?;
    Ok((
        g.gan_value.scalar_value(),
        g.g_objective.scalar_value(),
        g.reconstruction.scalar_value(),
        g.class_term.map(|c| c.scalar_value()),
    ))
}

/// Same for the image modality.
pub fn image_gan_objectives_value(
    bundle: &AdversarialBundle,
    batch: &ImageBatch<f32>,
) -> Result<(f64, f64, f64, Option<f64>), GanError> {
    assert_eq!(bundle.cfg.target, TargetModality::ImageTp1);
    let batch64 = convert_image_batch::<f64>(batch);
    let tape = Tape::<f64>::new();
    let bp = bundle.bind(&tape);
    let g = build_image_gan(bundle, &bp, &tape, &batch64)?;
    Ok((
        g.gan_value.scalar_value(),
        g.g_objective.scalar_value(),
        g.reconstruction.scalar_value(),
        g.class_term.map(|c| c.scalar_value()),
    ))
}

/// The class-regularizer value alone (f64).
pub fn class_regularizer_value(
    bundle: &AdversarialBundle,
    batch: &FactorBatch<f32>,
) -> Result<f64, GanError> {
    let (_, _, _, ce) = gan_objectives_value(bundle, batch)?;
    ce.ok_or_else(|| GanError::BadBundle("bundle has no classifier".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::{BundleConfig, GanMode};
    use crate::data::{FACTOR_COUNT, IMG_SIZE};
    use ndarray::IxDyn;

    fn tiny_batch(with_img: bool) -> FactorBatch<f32> {
        let rng = crate::rng::CounterRng::new(42);
        let mut c = 0u64;
        let mut arr = |shape: &[usize], center: f32| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    c += 1;
                    rng.uniform_at(c) as f32 - center
                })
                .collect();
            ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
        };
        FactorBatch {
            x: arr(&[2, FACTOR_COUNT], 0.0),
            mask: arr(&[2, FACTOR_COUNT], 0.0).mapv(|v| f32::from(v > 0.3)),
            cond_image: with_img.then(|| arr(&[2, 1, IMG_SIZE, IMG_SIZE], 0.0)),
            noise: arr(&[2, 64], 0.5),
            fake_mask: arr(&[2, FACTOR_COUNT], 0.0).mapv(|v| f32::from(v > 0.3)),
            labels: vec![0, 1],
        }
    }

    #[test]
    fn half_discriminator_hits_two_log_half() {
        // Zeroing the discriminator makes its sigmoid output exactly 0.5,
        // so the GAN value is 2 ln(1/2) for both model families.
        for (mode, with_img) in [(GanMode::Pbigan, false), (GanMode::Cpbigan, true)] {
            let mut bundle = AdversarialBundle::init(BundleConfig::new(
                mode,
                TargetModality::Factors,
                11,
            ))
            .unwrap();
            bundle.discriminator.zero_all();
            let (gan, _, _, _) = gan_objectives_value(&bundle, &tiny_batch(with_img)).unwrap();
            let expect = 2.0 * 0.5f64.ln();
            assert!((gan - expect).abs() < 1e-6, "{mode:?}: {gan} vs {expect}");
        }
    }

    #[test]
    fn uniform_classifier_hits_log_two() {
        let mut bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Cpbigan,
            TargetModality::Factors,
            11,
        ))
        .unwrap();
        bundle.classifier.zero_all();
        let ce = class_regularizer_value(&bundle, &tiny_batch(true)).unwrap();
        assert!((ce - std::f64::consts::LN_2).abs() < 1e-6, "{ce}");
    }

    #[test]
    fn hand_set_discriminator_outputs() {
        // With D = 0.8 on real and 0.3 on fake, the value is
        // ln 0.8 + ln 0.7. Force the outputs through the final bias after
        // zeroing the rest: sigmoid(b) is constant for both tuples, so use
        // two bundles to pin each side separately and combine by hand.
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mut bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Pbigan,
            TargetModality::Factors,
            11,
        ))
        .unwrap();
        bundle.discriminator.zero_all();
        let batch = tiny_batch(false);
        // bias = logit(0.8): both branches output 0.8 -> ln .8 + ln .2
        bundle
            .discriminator
            .get_mut("disc.l3.b")
            .unwrap()
            .fill(logit(0.8) as f32);
        let (gan, _, _, _) = gan_objectives_value(&bundle, &batch).unwrap();
        let expect_08 = 0.8f64.ln() + 0.2f64.ln();
        assert!((gan - expect_08).abs() < 1e-5, "{gan} vs {expect_08}");
        // the hand arithmetic for the mixed 0.8/0.3 case:
        let mixed = 0.8f64.ln() + 0.7f64.ln();
        assert!((mixed - (-0.579_818_495_252_942)).abs() < 1e-12);
    }
}
