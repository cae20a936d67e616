use imputelab::adversarial::{impute_factors, train_factor_gan, AdversarialBundle, BundleConfig, GanMode, GanTrainConfig, TargetModality};
use imputelab::data::SIZE_FACTOR;
use imputelab::diff::AdamConfig;
use imputelab::missingness::{corrupt_factors, MechanismSpec};
use imputelab::stats::pearson_r;
use imputelab::synthgen::{make_dataset, GeneratorConfig};

#[test]
#[ignore]
fn scan() {
    let gen = GeneratorConfig { n: 400, ..GeneratorConfig::default() };
    let (train, val, test) = make_dataset(&gen).unwrap();
    let rate = 0.8;
    let mut ctrain = train.records.clone();
    let mut cval = val.records.clone();
    let mut ctest = test.records.clone();
    corrupt_factors(&mut ctrain, &MechanismSpec::mcar(rate, 11)).unwrap();
    corrupt_factors(&mut cval, &MechanismSpec::mcar(rate, 12)).unwrap();
    corrupt_factors(&mut ctest, &MechanismSpec::mcar(rate, 13)).unwrap();

    for (epochs, lam_rec, lam_ce, lr) in [
        (200usize, 4.0f32, 2.0f32, 1e-3),
        (200, 4.0, 4.0, 1e-3),
        (200, 8.0, 4.0, 1e-3),
        (300, 4.0, 4.0, 1e-3),
    ] {
        let t0 = std::time::Instant::now();
        let mut bundle = AdversarialBundle::init(BundleConfig {
            lambda_rec: lam_rec,
            lambda_ce: lam_ce,
            ..BundleConfig::new(GanMode::Cpbigan, TargetModality::Factors, 7)
        }).unwrap();
        let cfg = GanTrainConfig {
            adam: AdamConfig::default().with_lr(lr),
            batch: 32,
            epochs,
            probe_every: 25,
            seed: 3,
            fake_mask_rate: rate,
        };
        let out = train_factor_gan(&mut bundle, &ctrain, &cval, &cfg).unwrap();
        let mut imp = Vec::new();
        let mut truth = Vec::new();
        for (cr, orig) in ctest.iter().zip(&test.records) {
            if cr.factors.mask[SIZE_FACTOR] == 0 {
                let r = impute_factors(&bundle, cr).unwrap();
                imp.push(f64::from(r.record.factors.values[SIZE_FACTOR]));
                truth.push(f64::from(orig.factors.values[SIZE_FACTOR]));
            }
        }
        let r = pearson_r(&imp, &truth).unwrap_or(f64::NAN);
        let best_probe = out.probes.iter().map(|(_, a)| *a).fold(f64::NAN, f64::max);
        println!(
            "epochs {epochs} lam_rec {lam_rec} lam_ce {lam_ce} lr {lr}: size r = {r:.3}, best probe {best_probe:.3} (epoch {}), {:.1}s",
            out.best_epoch, t0.elapsed().as_secs_f32()
        );
    }
}
