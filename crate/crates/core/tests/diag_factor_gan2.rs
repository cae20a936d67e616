use imputelab::adversarial::{impute_factors, train_factor_gan, AdversarialBundle, BundleConfig, GanMode, GanTrainConfig, TargetModality};
use imputelab::data::SIZE_FACTOR;
use imputelab::diff::AdamConfig;
use imputelab::missingness::{corrupt_factors, MechanismSpec};
use imputelab::synthgen::{make_dataset, GeneratorConfig};

#[test]
#[ignore]
fn diag_curves() {
    let gen = GeneratorConfig { n: 400, ..GeneratorConfig::default() };
    let (train, val, test) = make_dataset(&gen).unwrap();
    let rate = 0.8;
    let mut ctrain = train.records.clone();
    let mut cval = val.records.clone();
    let mut ctest = test.records.clone();
    corrupt_factors(&mut ctrain, &MechanismSpec::mcar(rate, 11)).unwrap();
    corrupt_factors(&mut cval, &MechanismSpec::mcar(rate, 12)).unwrap();
    corrupt_factors(&mut ctest, &MechanismSpec::mcar(rate, 13)).unwrap();

    let mut bundle = AdversarialBundle::init(BundleConfig::new(GanMode::Cpbigan, TargetModality::Factors, 7)).unwrap();
    let cfg = GanTrainConfig {
        adam: AdamConfig::default().with_lr(1e-3),
        batch: 32,
        epochs: 60,
        probe_every: 30,
        seed: 3,
        fake_mask_rate: rate,
    };
    let out = train_factor_gan(&mut bundle, &ctrain, &cval, &cfg).unwrap();
    for row in out.curves.iter().step_by(40) {
        println!(
            "epoch {:3} step {} d={:+.4} g={:+.4} ce={:.4} rec={:.5}",
            row.epoch, row.step, row.d_loss, row.g_loss, row.ce, row.rec
        );
    }
    let last = out.curves.last().unwrap();
    println!("last: d={:+.4} g={:+.4} ce={:.4} rec={:.5}", last.d_loss, last.g_loss, last.ce, last.rec);
    // spread of imputed size over test records with size missing
    let mut vals = Vec::new();
    for cr in &ctest {
        if cr.factors.mask[SIZE_FACTOR] == 0 {
            let r = impute_factors(&bundle, cr).unwrap();
            vals.push(f64::from(r.record.factors.values[SIZE_FACTOR]));
        }
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
    println!("imputed size: mean {mean:.4} sd {sd:.6} n {}", vals.len());
    let truth_sd = {
        let t: Vec<f64> = test.records.iter().map(|r| f64::from(r.factors.values[SIZE_FACTOR])).collect();
        let m = t.iter().sum::<f64>() / t.len() as f64;
        (t.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64).sqrt()
    };
    println!("true size sd {truth_sd:.4}");
}
