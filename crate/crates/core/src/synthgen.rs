//! Synthetic paired-modality cohort generator.
//!
//! Each record carries a factor vector and a two-timepoint image pair with a
//! planted cross-modal dependency: the label shifts the "nodule size" and
//! "spiculation" factors, those factors drive the rendered blob, and the
//! label additionally grows the current-timepoint blob. Nuisance factors
//! load on two shared latent components so the factor matrix has low-rank
//! structure for the matrix-completion baseline to exploit.
//!
//! Every rendering constant below is an artifact choice of this repository,
//! tuned so that each single modality alone supports held-out AUC > 0.8 and
//! the fully observed downstream model lands in the 0.85-0.95 band.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::data::{
    normalize_value, Dataset, FactorVector, ImagePatch, LongitudinalImage, MultiModalRecord,
    NormalizationStats, Split, FACTOR_COUNT, IMG_SIZE, SIZE_FACTOR, SPICULATION_FACTOR,
};
use crate::rng::{derive_seed, derive_seed_index, stream_rng, CounterRng};

/// Base value of the size factor before label shift and noise.
pub const SIZE_BASE: f32 = 0.35;
/// Label shift of the size factor at signal_strength 1.
pub const SIZE_DELTA: f32 = 0.18;
/// Noise sigma of the size factor at noise_scale 1.
pub const SIZE_SIGMA: f32 = 0.12;
/// Same trio for the spiculation factor.
pub const SPIC_BASE: f32 = 0.30;
pub const SPIC_DELTA: f32 = 0.13;
pub const SPIC_SIGMA: f32 = 0.12;

/// Blob radius in pixels: MIN + SPAN * size_value at the current timepoint.
pub const RADIUS_MIN: f64 = 2.0;
pub const RADIUS_SPAN: f64 = 5.5;
/// Direct label bump of the current-timepoint radius. Kept small so the
/// pair never becomes a noiseless label channel.
pub const RADIUS_Y_GROWTH: f64 = 0.15;
/// Spiculation-driven shrink of the previous timepoint:
/// tp0 = tp1_base - GROWTH_SPAN * max(0, spic - SPIC_BASE). The growth a
/// model can read off the pair therefore inherits the spiculation factor's
/// noise and overlaps between classes.
pub const GROWTH_SPAN: f64 = 22.0;
/// Angular irregularity: radius modulated by AMP * spiculation * sin(LOBES*theta + phase).
pub const SPIC_AMP: f64 = 0.30;
pub const SPIC_LOBES: f64 = 5.0;
/// Logistic edge softness of the blob boundary, in pixels.
pub const BLOB_EDGE: f64 = 0.9;
/// Peak blob intensity added over the background.
pub const BLOB_AMP: f64 = 0.55;
/// Background: base level plus two octaves of seeded value noise.
pub const BG_BASE: f64 = 0.08;
pub const BG_OCTAVE1: f64 = 0.22;
pub const BG_OCTAVE2: f64 = 0.10;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("n = {0} is too small to populate train/validation/test")]
    TooSmall(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub n: usize,
    pub class_balance: f64,
    pub noise_scale: f64,
    pub signal_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n: 600,
            class_balance: 0.5,
            noise_scale: 1.0,
            signal_strength: 1.0,
            seed: 42,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if self.n < 1 {
            return Err(GenError::BadConfig("n must be >= 1".into()));
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return Err(GenError::BadConfig(format!(
                "class_balance must be in (0,1), got {}",
                self.class_balance
            )));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("signal_strength", self.signal_strength),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GenError::BadConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Timepoint selector for rendering.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timepoint {
    Tp0,
    Tp1,
}

/// Nuisance-factor generative tables: base value, loadings on the two shared
/// latent components, and private-noise sigma. Indices follow
/// [`crate::data::FACTOR_NAMES`]; the size/spiculation rows are unused (the
/// planted formulas above own those columns).
const NUISANCE_BASE: [f32; FACTOR_COUNT] = [
    0.55, 0.50, 0.45, 0.50, 0.40, 0.35, 0.60, 0.45, 0.30, 0.20, 0.25, 0.0, 0.0, 0.40,
];
const NUISANCE_LOAD1: [f32; FACTOR_COUNT] = [
    0.15, 0.00, 0.10, 0.12, 0.00, 0.14, 0.12, 0.16, 0.13, 0.08, 0.05, 0.0, 0.0, 0.00,
];
const NUISANCE_LOAD2: [f32; FACTOR_COUNT] = [
    0.00, 0.16, 0.08, 0.00, 0.14, 0.06, 0.00, 0.08, 0.10, 0.12, 0.14, 0.0, 0.0, 0.12,
];
const NUISANCE_SIGMA: [f32; FACTOR_COUNT] = [
    0.08, 0.10, 0.09, 0.08, 0.10, 0.08, 0.09, 0.08, 0.08, 0.09, 0.10, 0.0, 0.0, 0.10,
];

/// Deterministic size-factor formula (pre-noise). Exposed so tests can
/// evaluate the published formula independently.
pub fn size_factor_formula(signal_strength: f64, label: u8) -> f32 {
    SIZE_BASE + SIZE_DELTA * signal_strength as f32 * f32::from(label)
}

/// Generate one record. Deterministic given (cfg.seed, index).
pub fn generate_record(cfg: &GeneratorConfig, index: usize) -> Result<MultiModalRecord, GenError> {
    cfg.validate()?;
    if index >= cfg.n {
        return Err(GenError::BadConfig(format!(
            "index {index} out of range for n = {}",
            cfg.n
        )));
    }
    let record_key = derive_seed_index(derive_seed(cfg.seed, "record"), index as u64);
    let label = u8::from(CounterRng::new(record_key).uniform_at(0) < cfg.class_balance);

    let mut noise = stream_rng(record_key, "factor-noise");
    let mut draw = |sigma: f32| -> f32 {
        let z: f64 = noise.sample(StandardNormal);
        (cfg.noise_scale as f32) * sigma * z as f32
    };

    let u1 = draw(1.0);
    let u2 = draw(1.0);
    let mut values = vec![0.0f32; FACTOR_COUNT];
    for j in 0..FACTOR_COUNT {
        let eps = draw(1.0);
        values[j] = (NUISANCE_BASE[j]
            + NUISANCE_LOAD1[j] * u1
            + NUISANCE_LOAD2[j] * u2
            + NUISANCE_SIGMA[j] * eps)
            .clamp(0.0, 1.0);
    }
    let size_eps = draw(SIZE_SIGMA);
    values[SIZE_FACTOR] = (size_factor_formula(cfg.signal_strength, label) + size_eps).clamp(0.0, 1.0);
    let spic_eps = draw(SPIC_SIGMA);
    values[SPICULATION_FACTOR] = (SPIC_BASE
        + SPIC_DELTA * cfg.signal_strength as f32 * f32::from(label)
        + spic_eps)
        .clamp(0.0, 1.0);

    let factors = FactorVector::fully_observed(values);
    let background_seed = derive_seed_index(derive_seed(cfg.seed, "background"), index as u64);
    let tp0 = render_nodule(&factors, label, background_seed, Timepoint::Tp0);
    let tp1 = render_nodule(&factors, label, background_seed, Timepoint::Tp1);

    Ok(MultiModalRecord {
        id: index as u32,
        label,
        factors,
        images: LongitudinalImage {
            tp0,
            tp1,
            tp0_present: true,
            tp1_present: true,
        },
    })
}

/// Mean blob radius before angular perturbation.
pub fn blob_radius(size_value: f32, spic_value: f32, label: u8, tp: Timepoint) -> f64 {
    let base = RADIUS_MIN + RADIUS_SPAN * f64::from(size_value);
    match tp {
        Timepoint::Tp1 => base + RADIUS_Y_GROWTH * f64::from(label),
        Timepoint::Tp0 => {
            let growth = GROWTH_SPAN * f64::from((spic_value - SPIC_BASE).max(0.0));
            (base - growth).max(RADIUS_MIN)
        }
    }
}

/// Render one timepoint. The background texture and the spiculation phase
/// depend only on `background_seed`, so both timepoints of a record share
/// the exact same background; the label only grows the TP1 blob.
pub fn render_nodule(
    factors: &FactorVector,
    label: u8,
    background_seed: u64,
    tp: Timepoint,
) -> ImagePatch {
    let size_v = factors.values[SIZE_FACTOR];
    let spic_v = factors.values[SPICULATION_FACTOR];
    let rng = CounterRng::new(background_seed);

    // Two-octave seeded value noise, bilinear-interpolated lattices.
    let lattice1: Vec<f64> = (0..25).map(|i| rng.uniform_at(i)).collect(); // 5x5, counters 0..24
    let lattice2: Vec<f64> = (0..81).map(|i| rng.uniform_at(100 + i)).collect(); // 9x9, counters 100..180
    let phase = rng.uniform_at(200) * std::f64::consts::TAU;

    let bilinear = |lattice: &[f64], side: usize, x: f64, y: f64| -> f64 {
        let fx = x * (side - 1) as f64;
        let fy = y * (side - 1) as f64;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (ix1, iy1) = ((ix + 1).min(side - 1), (iy + 1).min(side - 1));
        let (tx, ty) = (fx - ix as f64, fy - iy as f64);
        let v00 = lattice[iy * side + ix];
        let v01 = lattice[iy * side + ix1];
        let v10 = lattice[iy1 * side + ix];
        let v11 = lattice[iy1 * side + ix1];
        (v00 * (1.0 - tx) + v01 * tx) * (1.0 - ty) + (v10 * (1.0 - tx) + v11 * tx) * ty
    };

    let r0 = blob_radius(size_v, spic_v, label, tp);
    let center = (IMG_SIZE as f64 - 1.0) / 2.0;
    let mut patch = ImagePatch::zeros();
    for i in 0..IMG_SIZE {
        for j in 0..IMG_SIZE {
            let (xn, yn) = (
                j as f64 / (IMG_SIZE - 1) as f64,
                i as f64 / (IMG_SIZE - 1) as f64,
            );
            let bg = BG_BASE
                + BG_OCTAVE1 * bilinear(&lattice1, 5, xn, yn)
                + BG_OCTAVE2 * bilinear(&lattice2, 9, xn, yn);
            let (dy, dx) = (i as f64 - center, j as f64 - center);
            let d = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);
            let r = r0 * (1.0 + SPIC_AMP * f64::from(spic_v) * (SPIC_LOBES * theta + phase).sin());
            let blob = BLOB_AMP / (1.0 + ((d - r) / BLOB_EDGE).exp());
            patch.pixels[[0, i, j]] = ((bg + blob).clamp(0.0, 1.0)) as f32;
        }
    }
    patch
}

/// Split sizes within +-1 of a 60/20/20 partition.
pub fn split_sizes(n: usize) -> (usize, usize, usize) {
    let train = (n as f64 * 0.6).round() as usize;
    let val = (n as f64 * 0.2).round() as usize;
    let test = n - train - val;
    (train, val, test)
}

/// Generate the full cohort and carve disjoint train/validation/test splits.
/// Factor values are min-max normalized with statistics from the train split
/// only; images are rendered from the raw (already unit-range) factor
/// values, so normalization never touches pixels.
pub fn make_dataset(cfg: &GeneratorConfig) -> Result<(Dataset, Dataset, Dataset), GenError> {
    cfg.validate()?;
    if cfg.n < 10 {
        return Err(GenError::TooSmall(cfg.n));
    }
    let records: Vec<MultiModalRecord> = (0..cfg.n)
        .map(|i| generate_record(cfg, i))
        .collect::<Result<_, _>>()?;

    let (n_train, n_val, n_test) = split_sizes(cfg.n);
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(GenError::TooSmall(cfg.n));
    }
    let mut order: Vec<usize> = (0..cfg.n).collect();
    let mut rng = stream_rng(cfg.seed, "split");
    for k in (1..order.len()).rev() {
        let j = rng.gen_range(0..=k);
        order.swap(k, j);
    }
    let pick = |range: std::ops::Range<usize>| -> Vec<MultiModalRecord> {
        order[range].iter().map(|&i| records[i].clone()).collect()
    };
    let train_recs = pick(0..n_train);
    let val_recs = pick(n_train..n_train + n_val);
    let test_recs = pick(n_train + n_val..cfg.n);

    let train_rows: Vec<Vec<f32>> = train_recs.iter().map(|r| r.factors.values.clone()).collect();
    let stats = NormalizationStats::from_rows(&train_rows)
        .map_err(|e| GenError::BadConfig(format!("stats: {e}")))?;

    let normalize = |mut recs: Vec<MultiModalRecord>| -> Vec<MultiModalRecord> {
        for rec in &mut recs {
            for (j, v) in rec.factors.values.iter_mut().enumerate() {
                *v = normalize_value(*v, stats.min[j], stats.max[j]);
            }
        }
        recs
    };

    Ok((
        Dataset {
            records: normalize(train_recs),
            split: Split::Train,
            stats: stats.clone(),
        },
        Dataset {
            records: normalize(val_recs),
            split: Split::Validation,
            stats: stats.clone(),
        },
        Dataset {
            records: normalize(test_recs),
            split: Split::Test,
            stats,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{CENTER_HI, CENTER_LO};

    #[test]
    fn records_are_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate_record(&cfg, 17).unwrap();
        let b = generate_record(&cfg, 17).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn size_factor_matches_formula_at_zero_noise() {
        let cfg = GeneratorConfig {
            noise_scale: 0.0,
            ..GeneratorConfig::default()
        };
        for idx in 0..200 {
            let rec = generate_record(&cfg, idx).unwrap();
            let expect = size_factor_formula(cfg.signal_strength, rec.label);
            assert_eq!(rec.factors.values[SIZE_FACTOR], expect, "index {idx}");
        }
    }

    #[test]
    fn class_balance_within_binomial_interval() {
        let cfg = GeneratorConfig {
            n: 10_000,
            ..GeneratorConfig::default()
        };
        let pos: usize = (0..cfg.n)
            .map(|i| generate_record(&cfg, i).unwrap().label as usize)
            .sum();
        let frac = pos as f64 / cfg.n as f64;
        assert!((frac - 0.5).abs() < 0.02, "positive fraction {frac}");
    }

    #[test]
    fn background_identical_across_timepoints_for_negatives() {
        let cfg = GeneratorConfig {
            noise_scale: 0.0,
            ..GeneratorConfig::default()
        };
        // find a label-0 record; with noise off the whole image matches.
        let rec = (0..50)
            .map(|i| generate_record(&cfg, i).unwrap())
            .find(|r| r.label == 0)
            .expect("some negative record");
        assert_eq!(rec.images.tp0, rec.images.tp1);
    }

    #[test]
    fn outside_window_pixels_shared_between_timepoints() {
        // Positive records grow only the blob; far corners stay identical.
        let cfg = GeneratorConfig::default();
        let rec = (0..50)
            .map(|i| generate_record(&cfg, i).unwrap())
            .find(|r| r.label == 1)
            .expect("some positive record");
        for (i, j) in [(0usize, 0usize), (0, 31), (31, 0), (31, 31)] {
            let a = rec.images.tp0.pixels[[0, i, j]];
            let b = rec.images.tp1.pixels[[0, i, j]];
            assert!((a - b).abs() < 1e-4, "corner ({i},{j}): {a} vs {b}");
        }
    }

    #[test]
    fn minimum_size_gives_minimum_radius() {
        assert_eq!(blob_radius(0.0, 0.0, 0, Timepoint::Tp1), RADIUS_MIN);
        assert_eq!(blob_radius(0.0, 0.0, 0, Timepoint::Tp0), RADIUS_MIN);
    }

    #[test]
    fn tp1_radius_at_least_tp0() {
        for spic in [0.0f32, 0.3, 0.6, 1.0] {
            for size in [0.0f32, 0.4, 0.9] {
                for label in [0u8, 1] {
                    assert!(
                        blob_radius(size, spic, label, Timepoint::Tp1)
                            >= blob_radius(size, spic, label, Timepoint::Tp0),
                        "size {size} spic {spic} label {label}"
                    );
                }
            }
        }
        // the label bump is on the current timepoint only
        assert!(blob_radius(0.5, 0.3, 1, Timepoint::Tp1) > blob_radius(0.5, 0.3, 0, Timepoint::Tp1));
    }

    #[test]
    fn positive_label_brightens_center() {
        let factors = FactorVector::fully_observed(
            (0..FACTOR_COUNT).map(|_| 0.5).collect(),
        );
        let neg = render_nodule(&factors, 0, 1234, Timepoint::Tp1);
        let pos = render_nodule(&factors, 1, 1234, Timepoint::Tp1);
        assert!(
            pos.central_mean() > neg.central_mean(),
            "central mean {} vs {}",
            pos.central_mean(),
            neg.central_mean()
        );
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let cfg = GeneratorConfig::default();
        for i in 0..20 {
            let rec = generate_record(&cfg, i).unwrap();
            for patch in [&rec.images.tp0, &rec.images.tp1] {
                assert!(patch.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
            }
        }
        let _ = (CENTER_LO, CENTER_HI);
    }

    #[test]
    fn split_sizes_ratio() {
        assert_eq!(split_sizes(10), (6, 2, 2));
        assert_eq!(split_sizes(1000), (600, 200, 200));
    }

    #[test]
    fn splits_disjoint_and_deterministic() {
        let cfg = GeneratorConfig {
            n: 300,
            ..GeneratorConfig::default()
        };
        let (tr1, va1, te1) = make_dataset(&cfg).unwrap();
        let (tr2, _, _) = make_dataset(&cfg).unwrap();
        assert_eq!(tr1.records, tr2.records);
        let mut ids = std::collections::HashSet::new();
        for ds in [&tr1, &va1, &te1] {
            for r in &ds.records {
                assert!(ids.insert(r.id), "id {} in two splits", r.id);
            }
        }
        assert_eq!(ids.len(), 300);
    }

    #[test]
    fn too_small_rejected() {
        let cfg = GeneratorConfig {
            n: 5,
            ..GeneratorConfig::default()
        };
        assert!(matches!(make_dataset(&cfg), Err(GenError::TooSmall(5))));
    }

    #[test]
    fn normalized_values_unit_range() {
        let cfg = GeneratorConfig {
            n: 100,
            ..GeneratorConfig::default()
        };
        let (tr, va, te) = make_dataset(&cfg).unwrap();
        for ds in [&tr, &va, &te] {
            for r in &ds.records {
                assert!(r.factors.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }
}
