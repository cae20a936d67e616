//! Non-adversarial comparators: mean imputation, last observation carried
//! forward for image pairs, and nuclear-norm soft-impute built on
//! singular-value thresholding.

use ndarray::Array2;
use thiserror::Error;

use crate::data::{ImputationResult, MissingMask, MultiModalRecord, Provenance};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("factor {index} has no observed train entries, no mean exists")]
    NoTrainMean { index: usize },
    #[error("both timepoints missing, nothing to carry forward")]
    BothTimepointsMissing,
    #[error("matrix has no observed entries")]
    AllMissing,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// Soft-impute settings: singular-value shrinkage, relative-change stopping
/// tolerance, and an iteration cap.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftImputeConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SoftImputeConfig {
    fn default() -> Self {
        SoftImputeConfig {
            lambda: 0.1,
            tol: 1e-4,
            max_iter: 200,
        }
    }
}

impl SoftImputeConfig {
    pub fn validate(&self) -> Result<(), BaselineError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(BaselineError::BadConfig(format!("lambda {}", self.lambda)));
        }
        if !(self.tol > 0.0) {
            return Err(BaselineError::BadConfig(format!("tol {}", self.tol)));
        }
        if self.max_iter < 1 {
            return Err(BaselineError::BadConfig("max_iter must be >= 1".into()));
        }
        Ok(())
    }
}

/// Column means of observed train entries. Errors if a column was never
/// observed.
pub fn observed_column_means(
    rows: &[Vec<f32>],
    masks: &[Vec<u8>],
) -> Result<Vec<f32>, BaselineError> {
    let f = rows.first().map(|r| r.len()).unwrap_or(0);
    let mut sums = vec![0.0f64; f];
    let mut counts = vec![0usize; f];
    for (row, mask) in rows.iter().zip(masks) {
        for j in 0..f {
            if mask[j] == 1 {
                sums[j] += f64::from(row[j]);
                counts[j] += 1;
            }
        }
    }
    (0..f)
        .map(|j| {
            if counts[j] == 0 {
                Err(BaselineError::NoTrainMean { index: j })
            } else {
                Ok((sums[j] / counts[j] as f64) as f32)
            }
        })
        .collect()
}

/// Replace missing factor entries by the train column means. Observed
/// entries pass through untouched.
pub fn mean_impute(
    train_means: &[f32],
    record: &MultiModalRecord,
) -> Result<ImputationResult, BaselineError> {
    if train_means.len() != record.factors.len() {
        return Err(BaselineError::Shape(format!(
            "{} means vs {} factors",
            train_means.len(),
            record.factors.len()
        )));
    }
    let mut out = record.clone();
    for (j, v) in out.factors.values.iter_mut().enumerate() {
        if out.factors.mask[j] == 0 {
            *v = train_means[j];
        }
    }
    let factor_provenance = ImputationResult::factor_tags(&record.factors.mask, Provenance::Imputed);
    out.factors.mask = vec![1; out.factors.len()];
    Ok(ImputationResult {
        record: out,
        factor_provenance,
        tp0_provenance: Provenance::Observed,
        tp1_provenance: Provenance::Observed,
    })
}

/// Last observation carried forward over the image pair: a missing TP1 takes
/// a copy of TP0 and vice versa. Both missing is an error.
pub fn locf_images(record: &MultiModalRecord) -> Result<ImputationResult, BaselineError> {
    let imgs = &record.images;
    if !imgs.tp0_present && !imgs.tp1_present {
        return Err(BaselineError::BothTimepointsMissing);
    }
    let mut out = record.clone();
    let mut tp0_prov = Provenance::Observed;
    let mut tp1_prov = Provenance::Observed;
    if !imgs.tp1_present {
        out.images.tp1 = imgs.tp0.clone();
        out.images.tp1_present = true;
        tp1_prov = Provenance::Imputed;
    }
    if !imgs.tp0_present {
        out.images.tp0 = imgs.tp1.clone();
        out.images.tp0_present = true;
        tp0_prov = Provenance::Imputed;
    }
    Ok(ImputationResult {
        record: out,
        factor_provenance: ImputationResult::factor_tags(&record.factors.mask, Provenance::Observed),
        tp0_provenance: tp0_prov,
        tp1_provenance: tp1_prov,
    })
}

/// Singular-value soft-thresholding: shrink every singular value by
/// `lambda`, clipping at zero, keeping the singular vectors.
pub fn svt(x: &Array2<f64>, lambda: f64) -> Array2<f64> {
    if lambda == 0.0 {
        return x.clone();
    }
    let (rows, cols) = x.dim();
    let m = nalgebra::DMatrix::from_row_iterator(rows, cols, x.iter().copied());
    let svd = m.svd(true, true);
    let u = svd.u.expect("svd u");
    let vt = svd.v_t.expect("svd v_t");
    let mut s = svd.singular_values;
    for v in s.iter_mut() {
        *v = (*v - lambda).max(0.0);
    }
    let k = s.len();
    let s_mat = nalgebra::DMatrix::from_fn(k, k, |i, j| if i == j { s[i] } else { 0.0 });
    let rec = u.columns(0, k) * s_mat * vt.rows(0, k);
    Array2::from_shape_fn((rows, cols), |(i, j)| rec[(i, j)])
}

/// Objective tracked by [`soft_impute`]:
/// 0.5 * ||mask .* (X - M)||_F^2 + lambda * ||X||_*.
pub fn soft_impute_objective(
    x: &Array2<f64>,
    m: &Array2<f64>,
    mask: &Array2<f64>,
    lambda: f64,
) -> f64 {
    let mut fit = 0.0;
    ndarray::Zip::from(x).and(m).and(mask).for_each(|&xv, &mv, &w| {
        fit += w * (xv - mv) * (xv - mv);
    });
    0.5 * fit + lambda * nuclear_norm(x)
}

pub fn nuclear_norm(x: &Array2<f64>) -> f64 {
    let (rows, cols) = x.dim();
    let m = nalgebra::DMatrix::from_row_iterator(rows, cols, x.iter().copied());
    m.singular_values().iter().sum()
}

/// Effective rank after thresholding tiny singular values.
pub fn effective_rank(x: &Array2<f64>, tol: f64) -> usize {
    let (rows, cols) = x.dim();
    let m = nalgebra::DMatrix::from_row_iterator(rows, cols, x.iter().copied());
    m.singular_values().iter().filter(|&&s| s > tol).count()
}

/// Soft-impute iteration: X <- svt(mask.*M + (1-mask).*X, lambda) until the
/// relative Frobenius change drops below tol or max_iter is reached.
/// Returns the completed matrix; observed entries of the *result matrix*
/// are the SVT reconstruction (callers merge observed entries back).
pub fn soft_impute(
    m: &Array2<f64>,
    mask: &MissingMask,
    cfg: &SoftImputeConfig,
) -> Result<Array2<f64>, BaselineError> {
    cfg.validate()?;
    let mask_shape = mask.entries.shape();
    if mask_shape != m.shape() {
        return Err(BaselineError::Shape(format!(
            "matrix {:?} vs mask {:?}",
            m.shape(),
            mask_shape
        )));
    }
    if mask.entries.iter().all(|&b| b == 0) {
        return Err(BaselineError::AllMissing);
    }
    let maskf = Array2::from_shape_fn(m.dim(), |(i, j)| f64::from(mask.entries[[i, j]]));
    let mut x = Array2::<f64>::zeros(m.dim());
    for _ in 0..cfg.max_iter {
        let filled = &maskf * m + (1.0 - &maskf) * &x;
        let next = svt(&filled, cfg.lambda);
        let delta = (&next - &x).mapv(|v| v * v).sum().sqrt();
        let scale = x.mapv(|v| v * v).sum().sqrt().max(1e-12);
        x = next;
        if delta / scale < cfg.tol {
            break;
        }
    }
    Ok(x)
}

/// Convenience wrapper: soft-impute a factor matrix and merge the observed
/// entries back exactly.
pub fn soft_impute_merged(
    m: &Array2<f64>,
    mask: &MissingMask,
    cfg: &SoftImputeConfig,
) -> Result<Array2<f64>, BaselineError> {
    let x = soft_impute(m, mask, cfg)?;
    let mut out = x;
    ndarray::Zip::indexed(&mut out).for_each(|(i, j), v| {
        if mask.entries[[i, j]] == 1 {
            *v = m[[i, j]];
        }
    });
    Ok(out)
}
