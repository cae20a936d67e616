//! Canonical data model: two-modality records, masks, datasets, and the
//! merge rule that preserves observed entries.

pub mod io;

use ndarray::{Array3, ArrayD, IxDyn};
use thiserror::Error;

/// Number of risk-style factors per record.
pub const FACTOR_COUNT: usize = 14;
/// Image geometry: single channel, 32x32.
pub const IMG_CHANNELS: usize = 1;
pub const IMG_SIZE: usize = 32;
/// Side length of the central window (the "nodule" region).
pub const CENTER_SIZE: usize = 16;
/// First row/column of the central window.
pub const CENTER_LO: usize = (IMG_SIZE - CENTER_SIZE) / 2;
/// One past the last row/column of the central window.
pub const CENTER_HI: usize = CENTER_LO + CENTER_SIZE;

/// Index of the planted "size" factor.
pub const SIZE_FACTOR: usize = 11;
/// Index of the planted "spiculation" factor.
pub const SPICULATION_FACTOR: usize = 12;

/// Factor names, in column order. The first two mimic EMR fields, the middle
/// nine decision-visit fields, and the last three report-derived fields; the
/// grouping drives the report-phase MNAR preset.
pub const FACTOR_NAMES: [&str; FACTOR_COUNT] = [
    "age",
    "sex",
    "education",
    "bmi",
    "race",
    "quit_smoke_time",
    "smoke_status",
    "pack_year",
    "copd",
    "cancer_history",
    "family_lung_history",
    "nodule_size",
    "spiculation",
    "upper_lobe",
];

/// Provenance phase of each factor column.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorGroup {
    Emr,
    Sdm,
    Report,
}

pub fn factor_group(index: usize) -> FactorGroup {
    match index {
        0 | 1 => FactorGroup::Emr,
        2..=10 => FactorGroup::Sdm,
        11..=13 => FactorGroup::Report,
        _ => panic!("factor index {index} out of range"),
    }
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt dataset file at {pos}: {msg}")]
    Corrupt { pos: String, msg: String },
}

/// Factor values plus their per-entry observation mask (1 = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct FactorVector {
    pub values: Vec<f32>,
    pub mask: Vec<u8>,
}

impl FactorVector {
    pub fn fully_observed(values: Vec<f32>) -> Self {
        let mask = vec![1u8; values.len()];
        FactorVector { values, mask }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn all_observed(&self) -> bool {
        self.mask.iter().all(|&m| m == 1)
    }

    pub fn observed_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.values.len() != self.mask.len() {
            return Err(DataError::ShapeMismatch(format!(
                "factor values len {} vs mask len {}",
                self.values.len(),
                self.mask.len()
            )));
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFinite(format!("factor {i}")));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(DataError::Invalid("mask entries must be 0/1".into()));
        }
        Ok(())
    }
}

/// Single-channel image patch with pixels in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    pub pixels: Array3<f32>,
}

impl ImagePatch {
    pub fn zeros() -> Self {
        ImagePatch {
            pixels: Array3::zeros((IMG_CHANNELS, IMG_SIZE, IMG_SIZE)),
        }
    }

    pub fn from_pixels(pixels: Array3<f32>) -> Result<Self, DataError> {
        if pixels.dim() != (IMG_CHANNELS, IMG_SIZE, IMG_SIZE) {
            return Err(DataError::ShapeMismatch(format!(
                "image patch must be {IMG_CHANNELS}x{IMG_SIZE}x{IMG_SIZE}, got {:?}",
                pixels.dim()
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(DataError::NonFinite("image pixel".into()));
        }
        Ok(ImagePatch { pixels })
    }

    /// Copy with the central window zeroed ("background" view).
    pub fn center_masked(&self) -> ImagePatch {
        let mut pixels = self.pixels.clone();
        for i in CENTER_LO..CENTER_HI {
            for j in CENTER_LO..CENTER_HI {
                pixels[[0, i, j]] = 0.0;
            }
        }
        ImagePatch { pixels }
    }

    /// Mean intensity inside the central window.
    pub fn central_mean(&self) -> f64 {
        let mut acc = 0.0f64;
        for i in CENTER_LO..CENTER_HI {
            for j in CENTER_LO..CENTER_HI {
                acc += f64::from(self.pixels[[0, i, j]]);
            }
        }
        acc / (CENTER_SIZE * CENTER_SIZE) as f64
    }
}

/// Two-timepoint image pair with per-timepoint presence flags.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalImage {
    pub tp0: ImagePatch,
    pub tp1: ImagePatch,
    pub tp0_present: bool,
    pub tp1_present: bool,
}

impl LongitudinalImage {
    /// Most recent present timepoint, if any.
    pub fn latest_available(&self) -> Option<&ImagePatch> {
        if self.tp1_present {
            Some(&self.tp1)
        } else if self.tp0_present {
            Some(&self.tp0)
        } else {
            None
        }
    }
}

/// One subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalRecord {
    pub id: u32,
    pub factors: FactorVector,
    pub images: LongitudinalImage,
    pub label: u8,
}

/// Binary observation mask shaped like the object it masks (1 = observed).
#[derive(Debug, Clone, PartialEq)]
pub struct MissingMask {
    pub entries: ArrayD<u8>,
}

impl MissingMask {
    pub fn from_vec(entries: Vec<u8>) -> Self {
        let n = entries.len();
        MissingMask {
            entries: ArrayD::from_shape_vec(IxDyn(&[n]), entries).unwrap(),
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        MissingMask {
            entries: ArrayD::from_elem(IxDyn(shape), 1u8),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        MissingMask {
            entries: ArrayD::from_elem(IxDyn(shape), 0u8),
        }
    }

    pub fn observed_fraction(&self) -> f64 {
        let n = self.entries.len();
        if n == 0 {
            return 1.0;
        }
        self.entries.iter().filter(|&&m| m == 1).count() as f64 / n as f64
    }

    pub fn as_vec(&self) -> Vec<u8> {
        self.entries.iter().copied().collect()
    }
}

/// Dataset split membership.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(DataError::Invalid(format!("unknown split {other}"))),
        }
    }
}

/// Per-factor scaling statistics, always computed on the train split.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub mean: Vec<f32>,
    pub min: Vec<f32>,
    pub max: Vec<f32>,
}

impl NormalizationStats {
    /// Compute from raw factor rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, DataError> {
        let f = rows.first().map(|r| r.len()).unwrap_or(FACTOR_COUNT);
        let mut mean = vec![0.0f32; f];
        let mut min = vec![f32::INFINITY; f];
        let mut max = vec![f32::NEG_INFINITY; f];
        for row in rows {
            if row.len() != f {
                return Err(DataError::ShapeMismatch("ragged factor rows".into()));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFinite(format!("factor {j}")));
                }
                min[j] = min[j].min(v);
                max[j] = max[j].max(v);
            }
        }
        let n = rows.len().max(1) as f64;
        for j in 0..f {
            let s: f64 = rows.iter().map(|r| f64::from(r[j])).sum();
            mean[j] = (s / n) as f32;
            if rows.is_empty() {
                min[j] = 0.0;
                max[j] = 1.0;
            }
        }
        Ok(NormalizationStats { mean, min, max })
    }
}

/// Origin of an entry in an imputation output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Observed,
    Imputed,
    Generated,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Observed => "observed",
            Provenance::Imputed => "imputed",
            Provenance::Generated => "generated",
        }
    }
}

/// A completed record plus per-entry provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ImputationResult {
    pub record: MultiModalRecord,
    pub factor_provenance: Vec<Provenance>,
    pub tp0_provenance: Provenance,
    pub tp1_provenance: Provenance,
}

impl ImputationResult {
    /// Factor provenance implied by a mask and a fill kind.
    pub fn factor_tags(mask: &[u8], fill: Provenance) -> Vec<Provenance> {
        mask.iter()
            .map(|&m| if m == 1 { Provenance::Observed } else { fill })
            .collect()
    }
}

/// A split with its records and the train-derived scaling statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub records: Vec<MultiModalRecord>,
    pub split: Split,
    pub stats: NormalizationStats,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }
}

/// Stack factor values of a batch into a (B, F) array.
pub fn stack_factors(records: &[&MultiModalRecord]) -> ArrayD<f32> {
    let b = records.len();
    let f = records.first().map(|r| r.factors.len()).unwrap_or(FACTOR_COUNT);
    let mut out = ndarray::Array2::<f32>::zeros((b, f));
    for (i, r) in records.iter().enumerate() {
        for (j, &v) in r.factors.values.iter().enumerate() {
            out[[i, j]] = v;
        }
    }
    out.into_dyn()
}

/// Stack zero-filled observed factor values next to their masks: (B, 2F)
/// with columns [x * m ; m]. The standard incomplete-encoder input.
pub fn stack_factors_masked(records: &[&MultiModalRecord]) -> ArrayD<f32> {
    let b = records.len();
    let f = records.first().map(|r| r.factors.len()).unwrap_or(FACTOR_COUNT);
    let mut out = ndarray::Array2::<f32>::zeros((b, 2 * f));
    for (i, r) in records.iter().enumerate() {
        for j in 0..f {
            let m = f32::from(r.factors.mask[j]);
            out[[i, j]] = r.factors.values[j] * m;
            out[[i, f + j]] = m;
        }
    }
    out.into_dyn()
}

/// Which timepoint to stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WhichTp {
    Tp0,
    Tp1,
}

/// Stack one timepoint of a batch into (B, 1, H, W). Presence flags are not
/// consulted; callers choose what to feed.
pub fn stack_patches(records: &[&MultiModalRecord], which: WhichTp) -> ArrayD<f32> {
    let b = records.len();
    let mut out = ndarray::Array4::<f32>::zeros((b, IMG_CHANNELS, IMG_SIZE, IMG_SIZE));
    for (i, r) in records.iter().enumerate() {
        let patch = match which {
            WhichTp::Tp0 => &r.images.tp0,
            WhichTp::Tp1 => &r.images.tp1,
        };
        out.index_axis_mut(ndarray::Axis(0), i).assign(&patch.pixels);
    }
    out.into_dyn()
}

/// x merged with a completion: observed entries (m=1) come from `x`,
/// missing entries from `x_hat`.
pub fn merge_observed(
    x: &ArrayD<f32>,
    x_hat: &ArrayD<f32>,
    m: &MissingMask,
) -> Result<ArrayD<f32>, DataError> {
    if x.shape() != x_hat.shape() || x.shape() != m.entries.shape() {
        return Err(DataError::ShapeMismatch(format!(
            "merge_observed: x {:?}, x_hat {:?}, mask {:?}",
            x.shape(),
            x_hat.shape(),
            m.entries.shape()
        )));
    }
    let mut out = x_hat.clone();
    ndarray::Zip::from(&mut out)
        .and(x)
        .and(&m.entries)
        .for_each(|o, &xv, &mv| {
            if mv == 1 {
                *o = xv;
            }
        });
    Ok(out)
}

/// Min-max scale raw factor values to [0,1] using train statistics.
/// Degenerate (constant) columns map to 0.5.
pub fn normalize_factors(raw: &[f32], stats: &NormalizationStats) -> Result<FactorVector, DataError> {
    if raw.len() != stats.min.len() {
        return Err(DataError::ShapeMismatch(format!(
            "normalize_factors: {} values vs {} stats columns",
            raw.len(),
            stats.min.len()
        )));
    }
    let mut values = Vec::with_capacity(raw.len());
    for (j, &v) in raw.iter().enumerate() {
        if !v.is_finite() {
            return Err(DataError::NonFinite(format!("raw factor {j}")));
        }
        values.push(normalize_value(v, stats.min[j], stats.max[j]));
    }
    Ok(FactorVector::fully_observed(values))
}

pub fn normalize_value(v: f32, min: f32, max: f32) -> f32 {
    let range = max - min;
    if range <= 0.0 {
        0.5
    } else {
        ((v - min) / range).clamp(0.0, 1.0)
    }
}
