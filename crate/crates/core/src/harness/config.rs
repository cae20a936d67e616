//! Experiment configuration: line-oriented `key = value` text with dotted
//! sections. Unknown keys are errors; every key has a default. The full
//! inventory is in [`HarnessConfig::render`] output and the README.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::missingness::MechanismKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for {key}: {msg}")]
    BadValue {
        line: usize,
        key: String,
        msg: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Image-axis imputation options. `None` disables the image path of the
/// downstream model (the "factor-only" row of the result table).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ImageImputerKind {
    None,
    Locf,
    Pbigan,
    CpbiganSharp,
    Cpbigan,
    Observed,
}

impl ImageImputerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ImageImputerKind::None => "none",
            ImageImputerKind::Locf => "locf",
            ImageImputerKind::Pbigan => "pbigan",
            ImageImputerKind::CpbiganSharp => "cpbigan_sharp",
            ImageImputerKind::Cpbigan => "cpbigan",
            ImageImputerKind::Observed => "observed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "factor-only" | "image-only-ablation" => Some(ImageImputerKind::None),
            "locf" => Some(ImageImputerKind::Locf),
            "pbigan" => Some(ImageImputerKind::Pbigan),
            "cpbigan_sharp" => Some(ImageImputerKind::CpbiganSharp),
            "cpbigan" => Some(ImageImputerKind::Cpbigan),
            "observed" | "fully-observed" => Some(ImageImputerKind::Observed),
            _ => None,
        }
    }

    pub const ALL: [ImageImputerKind; 6] = [
        ImageImputerKind::None,
        ImageImputerKind::Locf,
        ImageImputerKind::Pbigan,
        ImageImputerKind::CpbiganSharp,
        ImageImputerKind::Cpbigan,
        ImageImputerKind::Observed,
    ];
}

/// Factor-axis imputation options. `None` disables the factor path of the
/// downstream model (the "image-only" column).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorImputerKind {
    None,
    Mean,
    SoftImpute,
    Pbigan,
    Cpbigan,
    Observed,
}

impl FactorImputerKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            FactorImputerKind::None => "none",
            FactorImputerKind::Mean => "mean",
            FactorImputerKind::SoftImpute => "soft_impute",
            FactorImputerKind::Pbigan => "pbigan",
            FactorImputerKind::Cpbigan => "cpbigan",
            FactorImputerKind::Observed => "observed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" | "image-only" | "factor-only-ablation" => Some(FactorImputerKind::None),
            "mean" => Some(FactorImputerKind::Mean),
            "soft_impute" | "soft-impute" => Some(FactorImputerKind::SoftImpute),
            "pbigan" => Some(FactorImputerKind::Pbigan),
            "cpbigan" => Some(FactorImputerKind::Cpbigan),
            "observed" | "fully-observed" => Some(FactorImputerKind::Observed),
            _ => None,
        }
    }

    pub const ALL: [FactorImputerKind; 6] = [
        FactorImputerKind::None,
        FactorImputerKind::Mean,
        FactorImputerKind::SoftImpute,
        FactorImputerKind::Pbigan,
        FactorImputerKind::Cpbigan,
        FactorImputerKind::Observed,
    ];
}

/// Sweep axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    FactorRate,
    Tp1Rate,
}

impl SweepAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepAxis::FactorRate => "factor_rate",
            SweepAxis::Tp1Rate => "tp1_rate",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "factor_rate" => Some(SweepAxis::FactorRate),
            "tp1_rate" => Some(SweepAxis::Tp1Rate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub run_seed: u64,
    pub run_jobs: usize,
    pub generator_n: usize,
    pub generator_class_balance: f64,
    pub generator_noise_scale: f64,
    pub generator_signal_strength: f64,
    pub missing_mechanism: MechanismKind,
    pub missing_factor_rate: f64,
    pub missing_driver_index: usize,
    pub missing_slope: f64,
    pub missing_tp1_rate: f64,
    pub gan_lr: f64,
    pub gan_epochs: usize,
    pub gan_batch: usize,
    pub gan_probe_every: usize,
    pub mlm_lr: f64,
    pub mlm_epochs: usize,
    pub mlm_batch: usize,
    pub lambda_rec: f64,
    pub lambda_ce: f64,
    pub d_z: usize,
    pub soft_impute_lambda_grid: Vec<f64>,
    pub soft_impute_tol: f64,
    pub soft_impute_max_iter: usize,
    pub grid_image_imputers: Vec<ImageImputerKind>,
    pub grid_factor_imputers: Vec<FactorImputerKind>,
    pub grid_seeds: Vec<u64>,
    pub sweep_axis: SweepAxis,
    pub sweep_rates: Vec<f64>,
    pub sweep_methods: Vec<String>,
    pub bootstrap_n: usize,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        HarnessConfig {
            run_seed: 42,
            run_jobs: 0,
            generator_n: 600,
            generator_class_balance: 0.5,
            generator_noise_scale: 1.0,
            generator_signal_strength: 1.0,
            missing_mechanism: MechanismKind::Mcar,
            missing_factor_rate: 0.3,
            missing_driver_index: 0,
            missing_slope: 3.0,
            missing_tp1_rate: 0.5,
            gan_lr: 1e-3,
            gan_epochs: 40,
            gan_batch: 32,
            gan_probe_every: 20,
            mlm_lr: 1e-3,
            mlm_epochs: 60,
            mlm_batch: 32,
            lambda_rec: 1.0,
            lambda_ce: 1.0,
            d_z: 64,
            soft_impute_lambda_grid: vec![0.01, 0.05, 0.1, 0.5, 1.0],
            soft_impute_tol: 1e-4,
            soft_impute_max_iter: 200,
            grid_image_imputers: vec![
                ImageImputerKind::Pbigan,
                ImageImputerKind::Cpbigan,
                ImageImputerKind::Observed,
            ],
            grid_factor_imputers: vec![
                FactorImputerKind::Pbigan,
                FactorImputerKind::Cpbigan,
                FactorImputerKind::Observed,
            ],
            grid_seeds: vec![1, 2, 3, 4, 5],
            sweep_axis: SweepAxis::FactorRate,
            sweep_rates: vec![0.0, 0.2, 0.4, 0.6, 0.8],
            sweep_methods: vec!["pbigan".into(), "cpbigan".into()],
            bootstrap_n: 2000,
        }
    }
}

fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn join_u64(v: &[u64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl HarnessConfig {
    /// Canonical rendering: every key, sorted, one per line. Feeding this
    /// back through [`HarnessConfig::parse`] reproduces the config; its
    /// SHA-256 is the provenance digest embedded in every output file.
    pub fn render(&self) -> String {
        let mut pairs: Vec<(String, String)> = vec![
            ("bootstrap.n".into(), self.bootstrap_n.to_string()),
            ("generator.class_balance".into(), self.generator_class_balance.to_string()),
            ("generator.n".into(), self.generator_n.to_string()),
            ("generator.noise_scale".into(), self.generator_noise_scale.to_string()),
            ("generator.signal_strength".into(), self.generator_signal_strength.to_string()),
            (
                "grid.factor_imputers".into(),
                self.grid_factor_imputers
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            (
                "grid.image_imputers".into(),
                self.grid_image_imputers
                    .iter()
                    .map(|k| k.as_str())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("grid.seeds".into(), join_u64(&self.grid_seeds)),
            ("missing.driver_index".into(), self.missing_driver_index.to_string()),
            ("missing.factor_rate".into(), self.missing_factor_rate.to_string()),
            ("missing.mechanism".into(), self.missing_mechanism.as_str().to_string()),
            ("missing.slope".into(), self.missing_slope.to_string()),
            ("missing.tp1_rate".into(), self.missing_tp1_rate.to_string()),
            ("run.jobs".into(), self.run_jobs.to_string()),
            ("run.seed".into(), self.run_seed.to_string()),
            ("soft_impute.lambda_grid".into(), join_f64(&self.soft_impute_lambda_grid)),
            ("soft_impute.max_iter".into(), self.soft_impute_max_iter.to_string()),
            ("soft_impute.tol".into(), self.soft_impute_tol.to_string()),
            ("sweep.axis".into(), self.sweep_axis.as_str().to_string()),
            ("sweep.methods".into(), self.sweep_methods.join(",")),
            ("sweep.rates".into(), join_f64(&self.sweep_rates)),
            ("train.d_z".into(), self.d_z.to_string()),
            ("train.gan.batch".into(), self.gan_batch.to_string()),
            ("train.gan.epochs".into(), self.gan_epochs.to_string()),
            ("train.gan.lr".into(), self.gan_lr.to_string()),
            ("train.gan.probe_every".into(), self.gan_probe_every.to_string()),
            ("train.lambda_ce".into(), self.lambda_ce.to_string()),
            ("train.lambda_rec".into(), self.lambda_rec.to_string()),
            ("train.mlm.batch".into(), self.mlm_batch.to_string()),
            ("train.mlm.epochs".into(), self.mlm_epochs.to_string()),
            ("train.mlm.lr".into(), self.mlm_lr.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// SHA-256 hex digest of the canonical rendering.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.render().as_bytes());
        let out = hasher.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Parse overrides on top of the defaults. Lines may be blank or start
    /// with `#`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = HarnessConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: line_no,
                text: raw.to_string(),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.apply(key, value, line_no)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
        let bad = |msg: String| ConfigError::BadValue {
            line,
            key: key.to_string(),
            msg,
        };
        macro_rules! num {
            ($t:ty) => {
                value.parse::<$t>().map_err(|e| bad(e.to_string()))?
            };
        }
        let parse_f64_list = |v: &str| -> Result<Vec<f64>, ConfigError> {
            v.split(',')
                .map(|p| p.trim().parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect()
        };
        match key {
            "run.seed" => self.run_seed = num!(u64),
            "run.jobs" => self.run_jobs = num!(usize),
            "generator.n" => self.generator_n = num!(usize),
            "generator.class_balance" => self.generator_class_balance = num!(f64),
            "generator.noise_scale" => self.generator_noise_scale = num!(f64),
            "generator.signal_strength" => self.generator_signal_strength = num!(f64),
            "missing.mechanism" => {
                self.missing_mechanism = MechanismKind::parse(value)
                    .ok_or_else(|| bad(format!("unknown mechanism {value:?}")))?
            }
            "missing.factor_rate" => self.missing_factor_rate = num!(f64),
            "missing.driver_index" => self.missing_driver_index = num!(usize),
            "missing.slope" => self.missing_slope = num!(f64),
            "missing.tp1_rate" => self.missing_tp1_rate = num!(f64),
            "train.gan.lr" => self.gan_lr = num!(f64),
            "train.gan.epochs" => self.gan_epochs = num!(usize),
            "train.gan.batch" => self.gan_batch = num!(usize),
            "train.gan.probe_every" => self.gan_probe_every = num!(usize),
            "train.mlm.lr" => self.mlm_lr = num!(f64),
            "train.mlm.epochs" => self.mlm_epochs = num!(usize),
            "train.mlm.batch" => self.mlm_batch = num!(usize),
            "train.lambda_rec" => self.lambda_rec = num!(f64),
            "train.lambda_ce" => self.lambda_ce = num!(f64),
            "train.d_z" => self.d_z = num!(usize),
            "soft_impute.lambda_grid" => self.soft_impute_lambda_grid = parse_f64_list(value)?,
            "soft_impute.tol" => self.soft_impute_tol = num!(f64),
            "soft_impute.max_iter" => self.soft_impute_max_iter = num!(usize),
            "grid.image_imputers" => {
                self.grid_image_imputers = value
                    .split(',')
                    .map(|p| {
                        ImageImputerKind::parse(p.trim())
                            .ok_or_else(|| bad(format!("unknown image imputer {p:?}")))
                    })
                    .collect::<Result<_, _>>()?
            }
            "grid.factor_imputers" => {
                self.grid_factor_imputers = value
                    .split(',')
                    .map(|p| {
                        FactorImputerKind::parse(p.trim())
                            .ok_or_else(|| bad(format!("unknown factor imputer {p:?}")))
                    })
                    .collect::<Result<_, _>>()?
            }
            "grid.seeds" => {
                self.grid_seeds = value
                    .split(',')
                    .map(|p| p.trim().parse::<u64>().map_err(|e| bad(e.to_string())))
                    .collect::<Result<_, _>>()?
            }
            "sweep.axis" => {
                self.sweep_axis =
                    SweepAxis::parse(value).ok_or_else(|| bad(format!("unknown axis {value:?}")))?
            }
            "sweep.rates" => self.sweep_rates = parse_f64_list(value)?,
            "sweep.methods" => {
                self.sweep_methods = value.split(',').map(|p| p.trim().to_string()).collect()
            }
            "bootstrap.n" => self.bootstrap_n = num!(usize),
            other => {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: other.to_string(),
                })
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.grid_seeds.is_empty() {
            return Err(ConfigError::Invalid("grid.seeds must be non-empty".into()));
        }
        for rate in [self.missing_factor_rate, self.missing_tp1_rate] {
            if !(0.0..=1.0).contains(&rate) {
                return Err(ConfigError::Invalid(format!("missing rate {rate} outside [0,1]")));
            }
        }
        if self.grid_image_imputers.is_empty() || self.grid_factor_imputers.is_empty() {
            return Err(ConfigError::Invalid("grid axes must be non-empty".into()));
        }
        for m in &self.sweep_methods {
            if !matches!(m.as_str(), "pbigan" | "cpbigan" | "cpbigan_sharp") {
                return Err(ConfigError::Invalid(format!("unknown sweep method {m:?}")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let cfg = HarnessConfig::default();
        let parsed = HarnessConfig::parse(&cfg.render()).unwrap();
        assert_eq!(cfg, parsed);
    }

    #[test]
    fn unknown_key_is_error() {
        let err = HarnessConfig::parse("does.not.exist = 1\n").unwrap_err();
        assert!(matches!(err, ConfigError::UnknownKey { .. }));
    }

    #[test]
    fn overrides_apply() {
        let cfg = HarnessConfig::parse("generator.n = 99\nmissing.mechanism = mnar\n").unwrap();
        assert_eq!(cfg.generator_n, 99);
        assert_eq!(cfg.missing_mechanism, MechanismKind::Mnar);
    }

    #[test]
    fn digest_tracks_content() {
        let a = HarnessConfig::default();
        let b = HarnessConfig::parse("run.seed = 43\n").unwrap();
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest(), HarnessConfig::default().digest());
    }

    #[test]
    fn table_style_aliases_parse() {
        let cfg = HarnessConfig::parse(
            "grid.image_imputers = factor-only,LOCF\n".to_lowercase().as_str(),
        )
        .unwrap();
        assert_eq!(
            cfg.grid_image_imputers,
            vec![ImageImputerKind::None, ImageImputerKind::Locf]
        );
        let cfg2 =
            HarnessConfig::parse("grid.factor_imputers = image-only,fully-observed\n").unwrap();
        assert_eq!(
            cfg2.grid_factor_imputers,
            vec![FactorImputerKind::None, FactorImputerKind::Observed]
        );
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = HarnessConfig::parse("# a comment\n\nrun.seed = 7\n").unwrap();
        assert_eq!(cfg.run_seed, 7);
    }
}
