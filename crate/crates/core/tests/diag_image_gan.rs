use std::collections::HashMap;
use imputelab::adversarial::{impute_image_tp1, train_image_gan, AdversarialBundle, BundleConfig, GanMode, GanTrainConfig, TargetModality};
use imputelab::diff::AdamConfig;
use imputelab::missingness::drop_tp1;
use imputelab::stats::{cohens_d, permutation_mean_test};
use imputelab::synthgen::{make_dataset, GeneratorConfig};

#[test]
#[ignore]
fn scan_image() {
    let gen = GeneratorConfig { n: 400, ..GeneratorConfig::default() };
    let (train, val, test) = make_dataset(&gen).unwrap();
    let ctrain: Vec<_> = train.records.iter().map(|r| drop_tp1(0.5, 11, r).unwrap()).collect();
    let cval: Vec<_> = val.records.iter().map(|r| drop_tp1(0.5, 12, r).unwrap()).collect();
    let ctest: Vec<_> = test.records.iter().map(|r| drop_tp1(0.5, 13, r).unwrap()).collect();
    let cond: HashMap<u32, Vec<f32>> = train.records.iter().chain(&val.records).chain(&test.records)
        .map(|r| (r.id, r.factors.values.clone())).collect();

    for (mode, epochs, lam_rec, lam_ce) in [
        (GanMode::Cpbigan, 60usize, 4.0f32, 4.0f32),
        (GanMode::Cpbigan, 120, 4.0, 4.0),
        (GanMode::CpbiganSharp, 120, 4.0, 4.0),
        (GanMode::Pbigan, 120, 4.0, 4.0),
    ] {
        let t0 = std::time::Instant::now();
        let mut bundle = AdversarialBundle::init(BundleConfig {
            lambda_rec: lam_rec,
            lambda_ce: lam_ce,
            ..BundleConfig::new(mode, TargetModality::ImageTp1, 7)
        }).unwrap();
        let cfg = GanTrainConfig {
            adam: AdamConfig::default().with_lr(1e-3),
            batch: 32,
            epochs,
            probe_every: 30,
            seed: 3,
            fake_mask_rate: 0.0,
        };
        let out = train_image_gan(&mut bundle, &ctrain, &cval, &cond, &cfg).unwrap();
        // class separation of generated tp1 central intensities over test records with tp1 missing
        let mut pos = Vec::new();
        let mut neg = Vec::new();
        for cr in &ctest {
            if !cr.images.tp1_present {
                let fac = imputelab::data::FactorVector::fully_observed(cond[&cr.id].clone());
                let r = impute_image_tp1(&bundle, cr, &fac, 1000 + u64::from(cr.id)).unwrap();
                let m = r.record.images.tp1.central_mean();
                if cr.label == 1 { pos.push(m) } else { neg.push(m) }
            }
        }
        let d = cohens_d(&pos, &neg);
        let p = permutation_mean_test(&pos, &neg, 2000, 99);
        let best_probe = out.probes.iter().map(|(_, a)| *a).fold(f64::NAN, f64::max);
        println!(
            "{mode:?} e{epochs} rec{lam_rec} ce{lam_ce}: effect d = {d:.3} (p {p:.4}), probe {best_probe:.3} @ {}, n {}+{}, {:.0}s",
            out.best_epoch, pos.len(), neg.len(), t0.elapsed().as_secs_f32()
        );
    }
}
