//! Missingness-mechanism simulators.
//!
//! Three mechanisms on factor entries — MCAR (no dependency on data), MAR
//! (entry missingness driven by an always-observed factor), MNAR (entry
//! missingness driven by the entry's own value) — plus whole-image dropping
//! of the current timepoint and the fake-mask sampler used by the
//! adversarial fake branch.
//!
//! All masks come from the counter-based generator in [`crate::rng`], so
//! they are bit-reproducible across runs and platforms and can be drawn in
//! parallel with per-record derived keys.

use thiserror::Error;

use crate::data::{factor_group, FactorGroup, MissingMask, MultiModalRecord, FACTOR_COUNT};
use crate::rng::{derive_seed_index, CounterRng};

#[derive(Debug, Error)]
pub enum MissingnessError {
    #[error("rate {0} outside [0,1]")]
    BadRate(f64),
    #[error("MAR requires a driver_index")]
    MissingDriver,
    #[error("driver index {index} out of range for {len} factors")]
    DriverOutOfRange { index: usize, len: usize },
    #[error("intercept calibration failed: {0}")]
    Calibration(String),
}

/// Mechanism family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MechanismKind {
    Mcar,
    Mar,
    Mnar,
}

impl MechanismKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            MechanismKind::Mcar => "mcar",
            MechanismKind::Mar => "mar",
            MechanismKind::Mnar => "mnar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mcar" => Some(MechanismKind::Mcar),
            "mar" => Some(MechanismKind::Mar),
            "mnar" => Some(MechanismKind::Mnar),
            _ => None,
        }
    }
}

/// Full description of a factor-entry missingness mechanism.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanismSpec {
    pub kind: MechanismKind,
    /// Target expected missing fraction.
    pub rate: f64,
    /// Driving factor for MAR (must be observed; never masked by the op).
    pub driver_index: Option<usize>,
    /// Logistic slope for MAR/MNAR value dependence.
    pub slope: f64,
    pub seed: u64,
}

impl MechanismSpec {
    pub fn mcar(rate: f64, seed: u64) -> Self {
        MechanismSpec {
            kind: MechanismKind::Mcar,
            rate,
            driver_index: None,
            slope: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), MissingnessError> {
        if !(0.0..=1.0).contains(&self.rate) || !self.rate.is_finite() {
            return Err(MissingnessError::BadRate(self.rate));
        }
        if self.kind == MechanismKind::Mar && self.driver_index.is_none() {
            return Err(MissingnessError::MissingDriver);
        }
        Ok(())
    }
}

/// Report-phase MNAR preset: report-derived factors (nodule size,
/// spiculation, lobe) go missing preferentially with the value dependence
/// of MNAR, echoing missingness that concentrates in one collection phase.
pub fn report_phase_mnar(rate: f64, seed: u64) -> MechanismSpec {
    MechanismSpec {
        kind: MechanismKind::Mnar,
        rate,
        driver_index: None,
        slope: 3.0,
        seed,
    }
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Entry-wise completely-at-random mask over an arbitrary shape.
pub fn mcar_mask(shape: &[usize], rate: f64, seed: u64) -> Result<MissingMask, MissingnessError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(MissingnessError::BadRate(rate));
    }
    let rng = CounterRng::new(seed);
    let n: usize = shape.iter().product();
    let entries: Vec<u8> = (0..n)
        .map(|i| u8::from(rng.uniform_at(i as u64) >= rate))
        .collect();
    Ok(MissingMask {
        entries: ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), entries).unwrap(),
    })
}

/// Solve the logistic intercept so that the mean of
/// `logistic(slope * value + intercept)` over `values` hits `rate`.
/// Bisection to 1e-4 expected-fraction accuracy (inside the 1e-3 contract).
pub fn calibrate_intercept(values: &[f64], slope: f64, rate: f64) -> Result<f64, MissingnessError> {
    if values.is_empty() {
        return Err(MissingnessError::Calibration("no values".into()));
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(MissingnessError::BadRate(rate));
    }
    if rate == 0.0 {
        return Ok(-1e9);
    }
    if rate == 1.0 {
        return Ok(1e9);
    }
    let expected = |c: f64| -> f64 {
        values.iter().map(|&v| logistic(slope * v + c)).sum::<f64>() / values.len() as f64
    };
    let (mut lo, mut hi) = (-60.0, 60.0);
    if expected(lo) > rate || expected(hi) < rate {
        return Err(MissingnessError::Calibration(format!(
            "target {rate} unreachable with slope {slope}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected(mid) < rate {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    let c = 0.5 * (lo + hi);
    if (expected(c) - rate).abs() > 1e-4 {
        return Err(MissingnessError::Calibration(format!(
            "bisection residual {} at rate {rate}",
            (expected(c) - rate).abs()
        )));
    }
    Ok(c)
}

/// Missing-at-random factor mask for one record: entry missingness depends
/// only on the (observed) driver factor. The driver entry itself is never
/// masked. `intercept` must come from [`calibrate_intercept`] over the
/// cohort's driver values.
pub fn mar_mask(
    record: &MultiModalRecord,
    spec: &MechanismSpec,
    intercept: f64,
) -> Result<MissingMask, MissingnessError> {
    spec.validate()?;
    let driver = spec.driver_index.ok_or(MissingnessError::MissingDriver)?;
    let f = record.factors.len();
    if driver >= f {
        return Err(MissingnessError::DriverOutOfRange { index: driver, len: f });
    }
    let p_missing = logistic(spec.slope * f64::from(record.factors.values[driver]) + intercept);
    let rng = CounterRng::new(derive_seed_index(spec.seed, u64::from(record.id)));
    let entries: Vec<u8> = (0..f)
        .map(|j| {
            if j == driver {
                1
            } else {
                u8::from(rng.uniform_at(j as u64) >= p_missing)
            }
        })
        .collect();
    Ok(MissingMask::from_vec(entries))
}

/// Missing-not-at-random factor mask: each entry's missingness depends on
/// its own (possibly unobserved) value.
pub fn mnar_mask(
    record: &MultiModalRecord,
    spec: &MechanismSpec,
    intercept: f64,
) -> Result<MissingMask, MissingnessError> {
    spec.validate()?;
    let f = record.factors.len();
    let rng = CounterRng::new(derive_seed_index(spec.seed, u64::from(record.id)));
    let entries: Vec<u8> = (0..f)
        .map(|j| {
            let p = logistic(spec.slope * f64::from(record.factors.values[j]) + intercept);
            u8::from(rng.uniform_at(j as u64) >= p)
        })
        .collect();
    Ok(MissingMask::from_vec(entries))
}

/// Values the intercept calibration must see for a mechanism over a cohort:
/// driver values for MAR (one per record), all entry values for MNAR.
pub fn calibration_values(
    records: &[MultiModalRecord],
    spec: &MechanismSpec,
) -> Result<Vec<f64>, MissingnessError> {
    match spec.kind {
        MechanismKind::Mcar => Ok(vec![]),
        MechanismKind::Mar => {
            let driver = spec.driver_index.ok_or(MissingnessError::MissingDriver)?;
            records
                .iter()
                .map(|r| {
                    if driver >= r.factors.len() {
                        Err(MissingnessError::DriverOutOfRange {
                            index: driver,
                            len: r.factors.len(),
                        })
                    } else {
                        Ok(f64::from(r.factors.values[driver]))
                    }
                })
                .collect()
        }
        MechanismKind::Mnar => Ok(records
            .iter()
            .flat_map(|r| r.factors.values.iter().map(|&v| f64::from(v)))
            .collect()),
    }
}

/// Apply a calibrated mechanism to every record's factors.
/// For MAR, the driver is excluded both from masking and from the expected
/// missing-rate accounting of the calibration (rate applies to maskable
/// entries), so calibration values are reweighted accordingly upstream.
pub fn corrupt_factors(
    records: &mut [MultiModalRecord],
    spec: &MechanismSpec,
) -> Result<(), MissingnessError> {
    spec.validate()?;
    if spec.rate == 0.0 {
        return Ok(());
    }
    let intercept = match spec.kind {
        MechanismKind::Mcar => 0.0,
        _ => {
            let values = calibration_values(records, spec)?;
            calibrate_intercept(&values, spec.slope, spec.rate)?
        }
    };
    for (i, rec) in records.iter_mut().enumerate() {
        let mask = match spec.kind {
            MechanismKind::Mcar => {
                let key = derive_seed_index(spec.seed, u64::from(rec.id));
                mcar_mask(&[rec.factors.len()], spec.rate, key)?
            }
            MechanismKind::Mar => mar_mask(rec, spec, intercept)?,
            MechanismKind::Mnar => mnar_mask(rec, spec, intercept)?,
        };
        let _ = i;
        apply_factor_mask(rec, &mask);
    }
    Ok(())
}

/// Combine an existing factor mask with a new one (entries stay missing once
/// missing) without touching the stored values: consumers must go through
/// the mask.
pub fn apply_factor_mask(record: &mut MultiModalRecord, mask: &MissingMask) {
    let bits = mask.as_vec();
    assert_eq!(bits.len(), record.factors.len(), "factor mask length");
    for (m, b) in record.factors.mask.iter_mut().zip(bits) {
        *m &= b;
    }
}

/// With probability `rate`, mark the current-timepoint image missing.
/// Factors are untouched; pixels are left in place but flagged absent.
pub fn drop_tp1(
    rate: f64,
    seed: u64,
    record: &MultiModalRecord,
) -> Result<MultiModalRecord, MissingnessError> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(MissingnessError::BadRate(rate));
    }
    let rng = CounterRng::new(derive_seed_index(seed, u64::from(record.id)));
    let mut out = record.clone();
    if rng.uniform_at(0) < rate {
        out.images.tp1_present = false;
    }
    Ok(out)
}

/// Draw a mask for the adversarial fake branch from the marginal missing
/// rate of the training mechanism (entry-wise i.i.d., MCAR marginal).
pub fn sample_fake_mask(
    spec: &MechanismSpec,
    shape: &[usize],
    seed: u64,
) -> Result<MissingMask, MissingnessError> {
    spec.validate()?;
    mcar_mask(shape, spec.rate, seed)
}

/// Mean missing fraction over report-phase factor entries vs other entries;
/// used to sanity-check the report-phase preset.
pub fn report_phase_missing_split(records: &[MultiModalRecord]) -> (f64, f64) {
    let mut rep = (0usize, 0usize);
    let mut other = (0usize, 0usize);
    for r in records {
        for (j, &m) in r.factors.mask.iter().enumerate() {
            let slot = if j < FACTOR_COUNT && factor_group(j) == FactorGroup::Report {
                &mut rep
            } else {
                &mut other
            };
            slot.1 += 1;
            if m == 0 {
                slot.0 += 1;
            }
        }
    }
    (
        rep.0 as f64 / rep.1.max(1) as f64,
        other.0 as f64 / other.1.max(1) as f64,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{FactorVector, ImagePatch, LongitudinalImage};

    fn record_with(id: u32, values: Vec<f32>) -> MultiModalRecord {
        MultiModalRecord {
            id,
            label: 0,
            factors: FactorVector::fully_observed(values),
            images: LongitudinalImage {
                tp0: ImagePatch::zeros(),
                tp1: ImagePatch::zeros(),
                tp0_present: true,
                tp1_present: true,
            },
        }
    }

    #[test]
    fn mcar_rate_zero_and_one() {
        let all = mcar_mask(&[100], 0.0, 1).unwrap();
        assert!(all.entries.iter().all(|&m| m == 1));
        let none = mcar_mask(&[100], 1.0, 1).unwrap();
        assert!(none.entries.iter().all(|&m| m == 0));
    }

    #[test]
    fn mcar_calibration_at_ten_thousand() {
        let mask = mcar_mask(&[10_000], 0.3, 7).unwrap();
        let observed = mask.observed_fraction();
        assert!((observed - 0.7).abs() < 0.01, "observed {observed}");
    }

    #[test]
    fn mcar_is_deterministic() {
        let a = mcar_mask(&[64], 0.4, 9).unwrap();
        let b = mcar_mask(&[64], 0.4, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mar_zero_slope_hits_rate() {
        let records: Vec<_> = (0..5000)
            .map(|i| record_with(i, (0..14).map(|j| ((i + j as u32) % 10) as f32 / 10.0).collect()))
            .collect();
        let spec = MechanismSpec {
            kind: MechanismKind::Mar,
            rate: 0.3,
            driver_index: Some(0),
            slope: 0.0,
            seed: 3,
        };
        let values = calibration_values(&records, &spec).unwrap();
        let c = calibrate_intercept(&values, spec.slope, spec.rate).unwrap();
        let mut missing = 0usize;
        let mut total = 0usize;
        for r in &records {
            let m = mar_mask(r, &spec, c).unwrap();
            // driver entry never masked
            assert_eq!(m.as_vec()[0], 1);
            missing += m.as_vec().iter().skip(1).filter(|&&b| b == 0).count();
            total += 13;
        }
        let frac = missing as f64 / total as f64;
        assert!((frac - 0.3).abs() < 0.015, "missing fraction {frac}");
    }

    #[test]
    fn mar_positive_slope_correlates_with_driver() {
        let records: Vec<_> = (0..10_000)
            .map(|i| {
                let driver = (i % 100) as f32 / 100.0;
                record_with(i, std::iter::once(driver).chain((1..14).map(|_| 0.5)).collect())
            })
            .collect();
        let spec = MechanismSpec {
            kind: MechanismKind::Mar,
            rate: 0.3,
            driver_index: Some(0),
            slope: 4.0,
            seed: 5,
        };
        let values = calibration_values(&records, &spec).unwrap();
        let c = calibrate_intercept(&values, spec.slope, spec.rate).unwrap();
        // point-biserial: correlation between driver value and per-entry missingness
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for r in &records {
            let m = mar_mask(r, &spec, c).unwrap();
            for (j, &bit) in m.as_vec().iter().enumerate() {
                if j == 0 {
                    continue;
                }
                xs.push(f64::from(r.factors.values[0]));
                ys.push(f64::from(bit == 0));
            }
        }
        let r = crate::stats::pearson_r(&xs, &ys).unwrap();
        assert!(r > 0.05, "driver/missingness correlation {r}");
        let frac = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!((frac - 0.3).abs() < 0.01, "empirical rate {frac}");
    }

    #[test]
    fn mnar_masked_entries_have_higher_values() {
        let records: Vec<_> = (0..10_000)
            .map(|i| {
                let rng = CounterRng::new(u64::from(i) + 999);
                record_with(i, (0..14).map(|j| rng.uniform_at(j) as f32).collect())
            })
            .collect();
        let spec = MechanismSpec {
            kind: MechanismKind::Mnar,
            rate: 0.3,
            driver_index: None,
            slope: 4.0,
            seed: 8,
        };
        let values = calibration_values(&records, &spec).unwrap();
        let c = calibrate_intercept(&values, spec.slope, spec.rate).unwrap();
        let (mut missing_sum, mut missing_n) = (0.0f64, 0usize);
        let (mut obs_sum, mut obs_n) = (0.0f64, 0usize);
        let mut total_missing = 0usize;
        for r in &records {
            let m = mnar_mask(r, &spec, c).unwrap();
            for (j, &bit) in m.as_vec().iter().enumerate() {
                let v = f64::from(r.factors.values[j]);
                if bit == 0 {
                    missing_sum += v;
                    missing_n += 1;
                    total_missing += 1;
                } else {
                    obs_sum += v;
                    obs_n += 1;
                }
            }
        }
        assert!(missing_sum / missing_n as f64 > obs_sum / obs_n as f64);
        let frac = total_missing as f64 / (records.len() * 14) as f64;
        assert!((frac - 0.3).abs() < 0.01, "empirical rate {frac}");
    }

    #[test]
    fn mnar_zero_slope_reduces_to_mcar_rate() {
        let records: Vec<_> = (0..2000)
            .map(|i| record_with(i, (0..14).map(|j| (j as f32).cos().abs()).collect()))
            .collect();
        let spec = MechanismSpec {
            kind: MechanismKind::Mnar,
            rate: 0.25,
            driver_index: None,
            slope: 0.0,
            seed: 4,
        };
        let values = calibration_values(&records, &spec).unwrap();
        let c = calibrate_intercept(&values, spec.slope, spec.rate).unwrap();
        let mut missing = 0usize;
        for r in &records {
            missing += mnar_mask(r, &spec, c)
                .unwrap()
                .as_vec()
                .iter()
                .filter(|&&b| b == 0)
                .count();
        }
        let frac = missing as f64 / (2000.0 * 14.0);
        assert!((frac - 0.25).abs() < 0.015, "{frac}");
    }

    #[test]
    fn drop_tp1_limits() {
        let rec = record_with(1, vec![0.5; 14]);
        let kept = drop_tp1(0.0, 3, &rec).unwrap();
        assert!(kept.images.tp1_present);
        assert_eq!(kept, rec);
        let dropped = drop_tp1(1.0, 3, &rec).unwrap();
        assert!(!dropped.images.tp1_present);
        assert_eq!(dropped.factors, rec.factors);
    }

    #[test]
    fn drop_tp1_rate_calibrated() {
        let mut missing = 0usize;
        let n = 10_000u32;
        for i in 0..n {
            let rec = record_with(i, vec![0.5; 14]);
            if !drop_tp1(0.5, 17, &rec).unwrap().images.tp1_present {
                missing += 1;
            }
        }
        let frac = missing as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn fake_mask_matches_mechanism_marginal() {
        let spec = MechanismSpec::mcar(0.3, 2);
        let m = sample_fake_mask(&spec, &[10_000], 77).unwrap();
        assert!((m.observed_fraction() - 0.7).abs() < 0.01);
    }

    #[test]
    fn mcar_no_position_effect() {
        // Permutation test: variance of per-position missing counts under
        // within-row permutations should cover the observed statistic.
        let n = 10_000usize;
        let f = 14usize;
        let masks: Vec<Vec<u8>> = (0..n)
            .map(|i| mcar_mask(&[f], 0.3, derive_seed_index(4242, i as u64)).unwrap().as_vec())
            .collect();
        let stat = |rows: &[Vec<u8>]| -> f64 {
            let mut counts = vec![0f64; f];
            for row in rows {
                for (j, &b) in row.iter().enumerate() {
                    if b == 0 {
                        counts[j] += 1.0;
                    }
                }
            }
            let mean = counts.iter().sum::<f64>() / f as f64;
            counts.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / f as f64
        };
        let observed = stat(&masks);
        let rng = CounterRng::new(999_331);
        let mut worse = 0usize;
        let n_perm = 200;
        let mut counter = 0u64;
        for _ in 0..n_perm {
            let permuted: Vec<Vec<u8>> = masks
                .iter()
                .map(|row| {
                    let mut r = row.clone();
                    // Fisher-Yates with the counter stream
                    for k in (1..r.len()).rev() {
                        let j = rng.index_at(counter, k + 1);
                        counter += 1;
                        r.swap(k, j);
                    }
                    r
                })
                .collect();
            if stat(&permuted) >= observed {
                worse += 1;
            }
        }
        let p = worse as f64 / n_perm as f64;
        assert!(p > 0.01, "position-effect permutation p = {p}");
    }
}
