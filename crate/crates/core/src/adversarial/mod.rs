//! Adversarial encoder-decoder imputation.
//!
//! One family, three modes, two target modalities:
//!
//! * `pbigan` — unconditional: the discriminator judges
//!   (data, mask, latent-code) tuples; the generator decodes either the
//!   incomplete-data code (real branch) or noise (fake branch).
//! * `cpbigan` — the latent space is joined with a conditional code encoded
//!   from the *other* modality, and the generator is additionally
//!   regularized by a classification cross-entropy on its outputs.
//! * `cpbigan_sharp` — ablation of the image instantiation that feeds the
//!   previous-timepoint patch *without* masking its center.
//!
//! The unconditional model is the conditional one with conditional width
//! zero and the class term absent, so the two build byte-identical training
//! traces on the same seed.
//!
//! Imputing a wholly missing current-timepoint image is the limiting case:
//! the encoder consumes the previous timepoint's background (center masked
//! except in sharp mode), the decoder paints the full patch from noise plus
//! the conditional factor code through background skip connections, and the
//! generated patch replaces the merge-based output.

pub mod checkpoint;
pub mod impute;
pub mod losses;
pub mod nets;
pub mod train;

use thiserror::Error;

use crate::data::FACTOR_COUNT;
use crate::diff::{DiffError, ParamSet};

pub use impute::{impute_factors, impute_image_tp1};
pub use losses::{class_regularizer_value, gan_objectives_value};
pub use nets::{build_factor_gan, build_image_gan, FactorBatch, GanGraph, ImageBatch};
pub use train::{train_factor_gan, train_image_gan, write_curves_csv, CurveRow, GanTrainConfig};

#[derive(Debug, Error)]
pub enum GanError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid bundle: {0}")]
    BadBundle(String),
    #[error("training diverged (non-finite {what}) at epoch {epoch}, batch {batch}")]
    Diverged {
        what: String,
        epoch: usize,
        batch: usize,
    },
    #[error("imputation input invalid: {0}")]
    BadInput(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Downstream(#[from] Box<crate::downstream::DownstreamError>),
}

/// Adversarial model family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanMode {
    Pbigan,
    Cpbigan,
    CpbiganSharp,
}

impl GanMode {
    pub fn conditional(&self) -> bool {
        !matches!(self, GanMode::Pbigan)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            GanMode::Pbigan => "pbigan",
            GanMode::Cpbigan => "cpbigan",
            GanMode::CpbiganSharp => "cpbigan_sharp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pbigan" => Some(GanMode::Pbigan),
            "cpbigan" => Some(GanMode::Cpbigan),
            "cpbigan_sharp" => Some(GanMode::CpbiganSharp),
            _ => None,
        }
    }
}

/// Which modality the bundle imputes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetModality {
    Factors,
    ImageTp1,
}

impl TargetModality {
    pub fn as_str(&self) -> &'static str {
        match self {
            TargetModality::Factors => "factors",
            TargetModality::ImageTp1 => "image_tp1",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "factors" => Some(TargetModality::Factors),
            "image_tp1" => Some(TargetModality::ImageTp1),
            _ => None,
        }
    }
}

/// Construction settings for a bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleConfig {
    pub mode: GanMode,
    pub target: TargetModality,
    /// Latent width of the target-modality code.
    pub d_za: usize,
    /// Latent width of the conditional code (per modality).
    pub d_zb: usize,
    pub lambda_rec: f32,
    pub lambda_ce: f32,
    /// Drop the conditional encoder and classifier while keeping the mode
    /// tag; used to show the conditional model strictly generalizes the
    /// unconditional one.
    pub ablate_conditional: bool,
    pub seed: u64,
}

impl BundleConfig {
    pub fn new(mode: GanMode, target: TargetModality, seed: u64) -> Self {
        BundleConfig {
            mode,
            target,
            d_za: 64,
            d_zb: 64,
            lambda_rec: 1.0,
            lambda_ce: 1.0,
            ablate_conditional: false,
            seed,
        }
    }

    /// Width of the conditional code actually present in the joint latent.
    pub fn cond_dim(&self) -> usize {
        if self.mode.conditional() && !self.ablate_conditional {
            self.d_zb
        } else {
            0
        }
    }

    pub fn has_classifier(&self) -> bool {
        self.mode.conditional() && !self.ablate_conditional
    }

    /// Joint latent width seen by decoder and discriminator.
    pub fn d_joint(&self) -> usize {
        self.d_za + self.cond_dim()
    }

    pub fn validate(&self) -> Result<(), GanError> {
        if self.d_za == 0 {
            return Err(GanError::BadBundle("d_za must be positive".into()));
        }
        if self.mode == GanMode::CpbiganSharp && self.target == TargetModality::Factors {
            return Err(GanError::BadBundle(
                "cpbigan_sharp is an image-modality ablation".into(),
            ));
        }
        if !(self.lambda_rec.is_finite() && self.lambda_ce.is_finite()) {
            return Err(GanError::BadBundle("non-finite lambda".into()));
        }
        Ok(())
    }
}

/// Parameter bundle of one adversarial imputer: encoders, decoder,
/// discriminator and (conditional modes) classifier, plus the architecture
/// descriptors needed to rebuild forward graphs.
#[derive(Debug, Clone)]
pub struct AdversarialBundle {
    pub cfg: BundleConfig,
    pub encoder_a: ParamSet<f32>,
    pub encoder_b: ParamSet<f32>,
    pub decoder_a: ParamSet<f32>,
    pub discriminator: ParamSet<f32>,
    pub classifier: ParamSet<f32>,
    pub(crate) arch: nets::Arch,
}

impl AdversarialBundle {
    pub fn init(cfg: BundleConfig) -> Result<Self, GanError> {
        cfg.validate()?;
        Ok(nets::init_bundle(cfg))
    }

    /// All parameter sections in a fixed order.
    pub fn sections(&self) -> [(&'static str, &ParamSet<f32>); 5] {
        [
            ("encoder_a", &self.encoder_a),
            ("encoder_b", &self.encoder_b),
            ("decoder_a", &self.decoder_a),
            ("discriminator", &self.discriminator),
            ("classifier", &self.classifier),
        ]
    }

    pub fn n_params(&self) -> usize {
        self.sections().iter().map(|(_, p)| p.n_coords()).sum()
    }

    /// Expected factor width (fixed by the data model).
    pub fn factor_width(&self) -> usize {
        FACTOR_COUNT
    }
}
