//! Downstream evaluation: the two-path multi-modal longitudinal risk model,
//! AUC, and the paired bootstrap significance test.


use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::data::{stack_factors, stack_patches, MultiModalRecord, WhichTp, FACTOR_COUNT};
use crate::diff::layers::{Affine, Conv2d, GruCell};
use crate::diff::loss::ce_loss;
use crate::diff::{AdamConfig, BoundParams, DiffError, ParamSet, Real, Tape, Var};
use crate::rng::{stream_rng, CounterRng};
use rand::Rng;

#[derive(Debug, Error)]
pub enum DownstreamError {
    #[error("labels contain a single class, AUC undefined")]
    SingleClass,
    #[error("scores/labels length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("bootstrap exceeded the degenerate-resample cap")]
    DegenerateResamples,
    #[error("record {id} incomplete: {what}")]
    Incomplete { id: u32, what: String },
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("empty dataset")]
    Empty,
}

/// Which paths of the risk model are active. Ablations retrain the model
/// with the other path's features pinned to zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MlmMode {
    Full,
    ImageOnly,
    FactorOnly,
}

impl MlmMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MlmMode::Full => "full",
            MlmMode::ImageOnly => "image_only",
            MlmMode::FactorOnly => "factor_only",
        }
    }
}

/// Pinned architecture widths.
const IMG_CH: [usize; 3] = [8, 16, 32];
const IMG_FEAT: usize = 64;
const FAC_HIDDEN: usize = 64;

#[derive(Debug, Clone)]
struct MlmArch {
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    img_fc: Affine,
    gru: GruCell,
    fac: [Affine; 4],
    head: Affine,
}

impl MlmArch {
    fn init(ps: &mut ParamSet<f32>, seed: u64) -> Self {
        MlmArch {
            conv1: Conv2d::init(ps, "mlm.conv1", 1, IMG_CH[0], 4, 2, 1, seed),
            conv2: Conv2d::init(ps, "mlm.conv2", IMG_CH[0], IMG_CH[1], 4, 2, 1, seed),
            conv3: Conv2d::init(ps, "mlm.conv3", IMG_CH[1], IMG_CH[2], 4, 2, 1, seed),
            img_fc: Affine::init(ps, "mlm.img_fc", IMG_CH[2] * 16, IMG_FEAT, seed),
            gru: GruCell::init(ps, "mlm.gru", IMG_FEAT, IMG_FEAT, seed),
            fac: [
                Affine::init(ps, "mlm.fac1", FACTOR_COUNT, FAC_HIDDEN, seed),
                Affine::init(ps, "mlm.fac2", FAC_HIDDEN, FAC_HIDDEN, seed),
                Affine::init(ps, "mlm.fac3", FAC_HIDDEN, FAC_HIDDEN, seed),
                Affine::init(ps, "mlm.fac4", FAC_HIDDEN, FAC_HIDDEN, seed),
            ],
            head: Affine::init(ps, "mlm.head", IMG_FEAT + FAC_HIDDEN, 2, seed),
        }
    }
}

/// Two-path risk model: per-timepoint conv encoder fused by a gated
/// recurrent cell, a four-layer dense factor path, concatenation head.
#[derive(Debug, Clone)]
pub struct MlmModel {
    pub params: ParamSet<f32>,
    pub mode: MlmMode,
    arch: MlmArch,
}

/// Build the (B,2) logits graph for a batch.
pub fn mlm_logits<'t, T: Real>(
    arch_model: &MlmModel,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    tp0: &ArrayD<T>,
    tp1: &ArrayD<T>,
    factors: &ArrayD<T>,
) -> Result<Var<'t, T>, DiffError> {
    let arch = &arch_model.arch;
    let bsz = factors.shape()[0];
    let image_path = |x: &ArrayD<T>| -> Result<Var<'t, T>, DiffError> {
        let v = tape.leaf(x.clone());
        let c1 = arch.conv1.forward(bp, v)?.relu();
        let c2 = arch.conv2.forward(bp, c1)?.relu();
        let c3 = arch.conv3.forward(bp, c2)?.relu();
        let flat = c3.reshape(&[bsz, IMG_CH[2] * 16]);
        Ok(arch.img_fc.forward(bp, flat)?.relu())
    };

    let img_feat = if arch_model.mode == MlmMode::FactorOnly {
        tape.leaf(ArrayD::zeros(IxDyn(&[bsz, IMG_FEAT])))
    } else {
        let f0 = image_path(tp0)?;
        let f1 = image_path(tp1)?;
        let h0 = tape.leaf(ArrayD::zeros(IxDyn(&[bsz, IMG_FEAT])));
        let h1 = arch.gru.step(bp, f0, h0)?;
        arch.gru.step(bp, f1, h1)?
    };

    let fac_feat = if arch_model.mode == MlmMode::ImageOnly {
        tape.leaf(ArrayD::zeros(IxDyn(&[bsz, FAC_HIDDEN])))
    } else {
        let f = tape.leaf(factors.clone());
        let h1 = arch.fac[0].forward(bp, f)?.relu();
        let h2 = arch.fac[1].forward(bp, h1)?.relu();
        let h3 = arch.fac[2].forward(bp, h2)?.relu();
        arch.fac[3].forward(bp, h3)?
    };

    arch.head.forward(bp, Var::concat(1, &[img_feat, fac_feat]))
}

#[derive(Debug, Clone)]
pub struct MlmTrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    pub epochs: usize,
    pub mode: MlmMode,
    pub seed: u64,
}

impl Default for MlmTrainConfig {
    fn default() -> Self {
        MlmTrainConfig {
            adam: AdamConfig::default().with_lr(1e-3),
            batch: 32,
            epochs: 60,
            mode: MlmMode::Full,
            seed: 0,
        }
    }
}

/// Loss trace: (epoch, step, train ce loss).
pub type LossTrace = Vec<(usize, usize, f64)>;

#[derive(Debug, Clone)]
pub struct MlmTrainOutput {
    pub model: MlmModel,
    pub best_val_auc: f64,
    pub best_epoch: usize,
    pub trace: LossTrace,
    pub val_auc_per_epoch: Vec<f64>,
}

fn check_complete(records: &[MultiModalRecord], mode: MlmMode) -> Result<(), DownstreamError> {
    for r in records {
        if mode != MlmMode::FactorOnly && !(r.images.tp0_present && r.images.tp1_present) {
            return Err(DownstreamError::Incomplete {
                id: r.id,
                what: "missing image timepoint".into(),
            });
        }
        if mode != MlmMode::ImageOnly && !r.factors.all_observed() {
            return Err(DownstreamError::Incomplete {
                id: r.id,
                what: "missing factor entries".into(),
            });
        }
    }
    Ok(())
}

/// Train the risk model on completed records, returning the checkpoint with
/// the best validation AUC (ties keep the earlier epoch).
pub fn train_mlm(
    train: &[MultiModalRecord],
    val: &[MultiModalRecord],
    cfg: &MlmTrainConfig,
) -> Result<MlmTrainOutput, DownstreamError> {
    if train.is_empty() || val.is_empty() {
        return Err(DownstreamError::Empty);
    }
    check_complete(train, cfg.mode)?;
    check_complete(val, cfg.mode)?;

    let mut params = ParamSet::<f32>::new();
    let arch = MlmArch::init(&mut params, cfg.seed);
    let mut model = MlmModel {
        params,
        mode: cfg.mode,
        arch,
    };

    let mut shuffle = stream_rng(cfg.seed, "mlm-shuffle");
    let epochs = cfg.epochs.min(cfg.adam.max_epochs);
    let mut best: Option<(f64, usize, ParamSet<f32>)> = None;
    let mut trace: LossTrace = Vec::new();
    let mut val_aucs = Vec::new();
    let mut t_step = 0u64;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..epochs {
        for k in (1..order.len()).rev() {
            let j = shuffle.gen_range(0..=k);
            order.swap(k, j);
        }
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&MultiModalRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|r| usize::from(r.label)).collect();
            let tp0 = stack_patches(&batch, WhichTp::Tp0);
            let tp1 = stack_patches(&batch, WhichTp::Tp1);
            let fac = stack_factors(&batch);

            let tape = Tape::<f32>::new();
            let bp = BoundParams::bind(&tape, &model.params);
            let logits = mlm_logits(&model, &bp, &tape, &tp0, &tp1, &fac)?;
            let loss = ce_loss(logits, &labels);
            let loss_val = loss.scalar_value() as f64;
            if !loss_val.is_finite() {
                return Err(DownstreamError::Diverged { epoch, batch: bi });
            }
            trace.push((epoch, bi, loss_val));
            let grads = tape.backward(loss);
            let gmap = bp.collect_grads(&grads, &model.params);
            t_step += 1;
            model.params.adam_step(&gmap, &cfg.adam, t_step)?;
        }

        let scores = score_records(&model, val)?;
        let labels: Vec<u8> = val.iter().map(|r| r.label).collect();
        let val_auc = auc(&scores, &labels)?;
        val_aucs.push(val_auc);
        let better = match &best {
            None => true,
            Some((b, _, _)) => val_auc > *b,
        };
        if better {
            best = Some((val_auc, epoch, model.params.clone()));
        }
    }

    let (best_val_auc, best_epoch, best_params) = best.expect("at least one epoch");
    model.params = best_params;
    Ok(MlmTrainOutput {
        model,
        best_val_auc,
        best_epoch,
        trace,
        val_auc_per_epoch: val_aucs,
    })
}

/// Positive-class probabilities for a slice of records.
pub fn score_records(
    model: &MlmModel,
    records: &[MultiModalRecord],
) -> Result<Vec<f64>, DownstreamError> {
    if records.is_empty() {
        return Ok(vec![]);
    }
    let refs: Vec<&MultiModalRecord> = records.iter().collect();
    let tp0 = stack_patches(&refs, WhichTp::Tp0);
    let tp1 = stack_patches(&refs, WhichTp::Tp1);
    let fac = stack_factors(&refs);
    let tape = Tape::<f32>::new();
    let bp = BoundParams::bind(&tape, &model.params);
    let logits = mlm_logits(model, &bp, &tape, &tp0, &tp1, &fac)?;
    let v = logits.value();
    let mut out = Vec::with_capacity(records.len());
    for i in 0..records.len() {
        let (a, b) = (f64::from(v[[i, 0]]), f64::from(v[[i, 1]]));
        let m = a.max(b);
        let (ea, eb) = ((a - m).exp(), (b - m).exp());
        out.push(eb / (ea + eb));
    }
    Ok(out)
}

/// Wilcoxon-Mann-Whitney AUC with half credit for ties (average ranks).
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64, DownstreamError> {
    if scores.len() != labels.len() {
        return Err(DownstreamError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(DownstreamError::SingleClass);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the average rank
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if labels[k] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// O(n^2) pairwise AUC oracle (ties count one half).
pub fn auc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64, DownstreamError> {
    if scores.len() != labels.len() {
        return Err(DownstreamError::LengthMismatch(scores.len(), labels.len()));
    }
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        if li != 1 {
            continue;
        }
        for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
            if i == j || lj != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(DownstreamError::SingleClass);
    }
    Ok(wins / pairs)
}

/// Paired two-tailed bootstrap test of AUC difference. Subjects are
/// resampled with replacement `n` times; degenerate (single-class)
/// resamples are redrawn with a cap. The p-value is the add-one-smoothed
/// two-tailed tail mass of the delta-AUC bootstrap distribution.
pub fn bootstrap_pvalue(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[u8],
    n: usize,
    seed: u64,
) -> Result<f64, DownstreamError> {
    if scores_a.len() != labels.len() {
        return Err(DownstreamError::LengthMismatch(scores_a.len(), labels.len()));
    }
    if scores_b.len() != labels.len() {
        return Err(DownstreamError::LengthMismatch(scores_b.len(), labels.len()));
    }
    let m = labels.len();
    if m == 0 {
        return Err(DownstreamError::Empty);
    }
    let rng = CounterRng::new(seed);
    let mut counter = 0u64;
    let cap = (n as u64) * 100;
    let mut deltas = Vec::with_capacity(n);
    let mut draws = 0u64;
    while deltas.len() < n {
        if draws > cap {
            return Err(DownstreamError::DegenerateResamples);
        }
        draws += 1;
        let mut sa = Vec::with_capacity(m);
        let mut sb = Vec::with_capacity(m);
        let mut sl = Vec::with_capacity(m);
        for _ in 0..m {
            let k = rng.index_at(counter, m);
            counter += 1;
            sa.push(scores_a[k]);
            sb.push(scores_b[k]);
            sl.push(labels[k]);
        }
        let n_pos = sl.iter().filter(|&&l| l == 1).count();
        if n_pos == 0 || n_pos == m {
            continue;
        }
        deltas.push(auc(&sa, &sl)? - auc(&sb, &sl)?);
    }
    let le = deltas.iter().filter(|&&d| d <= 0.0).count();
    let ge = deltas.iter().filter(|&&d| d >= 0.0).count();
    let tail = le.min(ge);
    Ok((2.0 * (tail + 1) as f64 / (n + 1) as f64).min(1.0))
}

/// Grad-check-friendly scalar objective builder for the full risk-model
/// loss on a fixed batch (used by the certification suite).
pub fn mlm_loss_builder<'t, T: Real>(
    model: &MlmModel,
    tape: &'t Tape<T>,
    bp: &BoundParams<'t, T>,
    tp0: &ArrayD<T>,
    tp1: &ArrayD<T>,
    factors: &ArrayD<T>,
    labels: &[usize],
) -> Result<Var<'t, T>, DiffError> {
    let logits = mlm_logits(model, bp, tape, tp0, tp1, factors)?;
    Ok(ce_loss(logits, labels))
}

/// Convert an f32 batch array to the tape precision.
pub fn convert_batch<T: Real>(a: &ArrayD<f32>) -> ArrayD<T> {
    a.mapv(|x| T::from_f64(f64::from(x)))
}

/// Fresh untrained model (weights from the seed); used by smoke tests and
/// the gradient certification suite.
pub fn init_mlm(mode: MlmMode, seed: u64) -> MlmModel {
    let mut params = ParamSet::<f32>::new();
    let arch = MlmArch::init(&mut params, seed);
    MlmModel { params, mode, arch }
}

#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub image_imputer: String,
    pub factor_imputer: String,
    pub mechanism: String,
    pub factor_rate: f64,
    pub tp1_rate: f64,
    pub seed: u64,
    pub auc: f64,
    pub p_value: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{make_dataset, GeneratorConfig};

    #[test]
    fn auc_perfect_and_reversed() {
        let scores = [0.9, 0.8, 0.3];
        assert_eq!(auc(&scores, &[1, 1, 0]).unwrap(), 1.0);
        assert_eq!(auc(&scores, &[0, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn auc_hand_case() {
        // pairs: (0.35 vs 0.1)+, (0.35 vs 0.4)-, (0.8 vs 0.1)+, (0.8 vs 0.4)+ -> 3/4
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 0, 1, 1];
        assert_eq!(auc(&scores, &labels).unwrap(), 0.75);
    }

    #[test]
    fn auc_single_class_rejected() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(DownstreamError::SingleClass)
        ));
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        let rng = CounterRng::new(5);
        for inst in 0..200u64 {
            let n = 5 + (rng.u64_at(inst * 3) % 40) as usize;
            let mut scores = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            for k in 0..n {
                // quantized scores force ties
                let s = (rng.uniform_at(inst * 1000 + k as u64) * 8.0).floor() / 8.0;
                scores.push(s);
                labels.push(u8::from(rng.uniform_at(inst * 2000 + k as u64) < 0.5));
            }
            if labels.iter().all(|&l| l == 1) || labels.iter().all(|&l| l == 0) {
                labels[0] = 1 - labels[0];
            }
            let fast = auc(&scores, &labels).unwrap();
            let slow = auc_pairwise(&scores, &labels).unwrap();
            assert!(
                (fast - slow).abs() <= 1e-12,
                "instance {inst}: {fast} vs {slow}"
            );
        }
    }

    #[test]
    fn auc_monotone_invariance() {
        let rng = CounterRng::new(17);
        let scores: Vec<f64> = (0..60).map(|i| rng.uniform_at(i)).collect();
        let labels: Vec<u8> = (0..60).map(|i| u8::from(rng.uniform_at(1000 + i) < 0.4)).collect();
        let base = auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|s| (4.0 * s).exp() / 7.0 + 2.0).collect();
        assert!((auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn auc_complement_property() {
        let rng = CounterRng::new(23);
        // distinct scores, so no ties
        let scores: Vec<f64> = (0..40).map(|i| rng.uniform_at(i) + i as f64).collect();
        let labels: Vec<u8> = (0..40).map(|i| u8::from(rng.uniform_at(999 + i) < 0.5)).collect();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc(&neg, &labels).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bootstrap_identical_scores_p_one() {
        let rng = CounterRng::new(3);
        let scores: Vec<f64> = (0..50).map(|i| rng.uniform_at(i)).collect();
        let labels: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
        let p = bootstrap_pvalue(&scores, &scores, &labels, 2000, 9).unwrap();
        assert!(p >= 0.99, "p = {p}");
    }

    #[test]
    fn bootstrap_perfect_vs_antiperfect() {
        let labels: Vec<u8> = (0..50).map(|i| (i % 2) as u8).collect();
        let perfect: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
        let anti: Vec<f64> = labels.iter().map(|&l| 1.0 - f64::from(l)).collect();
        let p = bootstrap_pvalue(&perfect, &anti, &labels, 2000, 4).unwrap();
        assert!(p < 0.01, "p = {p}");
    }

    #[test]
    fn bootstrap_deterministic() {
        let rng = CounterRng::new(8);
        let a: Vec<f64> = (0..40).map(|i| rng.uniform_at(i)).collect();
        let b: Vec<f64> = (0..40).map(|i| rng.uniform_at(500 + i)).collect();
        let labels: Vec<u8> = (0..40).map(|i| (i % 2) as u8).collect();
        let p1 = bootstrap_pvalue(&a, &b, &labels, 500, 77).unwrap();
        let p2 = bootstrap_pvalue(&a, &b, &labels, 500, 77).unwrap();
        assert_eq!(p1, p2);
    }

    use crate::rng::CounterRng;

    #[test]
    fn mlm_smoke_and_determinism() {
        let cfg = GeneratorConfig {
            n: 40,
            ..GeneratorConfig::default()
        };
        let (train, val, _) = make_dataset(&cfg).unwrap();
        let tcfg = MlmTrainConfig {
            epochs: 2,
            batch: 8,
            seed: 5,
            ..MlmTrainConfig::default()
        };
        let out1 = train_mlm(&train.records, &val.records, &tcfg).unwrap();
        let out2 = train_mlm(&train.records, &val.records, &tcfg).unwrap();
        assert!(!out1.trace.is_empty());
        assert_eq!(out1.best_val_auc, out2.best_val_auc);
        assert_eq!(out1.trace, out2.trace);
    }

    #[test]
    fn mlm_rejects_incomplete_records() {
        let cfg = GeneratorConfig {
            n: 20,
            ..GeneratorConfig::default()
        };
        let (mut train, val, _) = make_dataset(&cfg).unwrap();
        train.records[0].factors.mask[3] = 0;
        let tcfg = MlmTrainConfig {
            epochs: 1,
            ..MlmTrainConfig::default()
        };
        assert!(matches!(
            train_mlm(&train.records, &val.records, &tcfg),
            Err(DownstreamError::Incomplete { .. })
        ));
    }
}
