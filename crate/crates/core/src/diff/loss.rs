//! Loss functions built from tape ops.

use ndarray::{ArrayD, IxDyn};

use super::tape::Var;
use super::{Real, PROB_EPS};

/// Mean binary cross-entropy of probabilities against 0/1 targets.
/// Probabilities are clamped to [eps, 1-eps] inside the logs.
pub fn bce_loss<'t, T: Real>(p: Var<'t, T>, targets: &[u8]) -> Var<'t, T> {
    let shape = p.shape();
    let n: usize = shape.iter().product();
    assert_eq!(n, targets.len(), "bce: {n} probs vs {} targets", targets.len());
    let eps = T::from_f64(PROB_EPS);
    let t_arr: Vec<T> = targets
        .iter()
        .map(|&t| if t == 1 { T::one() } else { T::zero() })
        .collect();
    let t_const = p
        .tape_ref()
        .leaf(ArrayD::from_shape_vec(IxDyn(&shape), t_arr).unwrap());
    // -(t*ln p + (1-t)*ln(1-p))
    let pos = t_const.mul(p.log_clamped(eps));
    let neg = t_const.one_minus().mul(p.one_minus().log_clamped(eps));
    pos.add(neg).mean().neg()
}

/// Mean cross-entropy of (B,C) logits against integer class labels.
pub fn ce_loss<'t, T: Real>(logits: Var<'t, T>, labels: &[usize]) -> Var<'t, T> {
    logits.cross_entropy_logits(labels)
}

/// Mean squared error over entries selected by a 0/1 weight mask:
/// sum(mask * (a-b)^2) / max(1, sum(mask)).
pub fn masked_mse<'t, T: Real>(a: Var<'t, T>, b: Var<'t, T>, mask: &ArrayD<T>) -> Var<'t, T> {
    assert_eq!(a.shape().as_slice(), mask.shape(), "masked_mse mask shape");
    let count: f64 = mask.iter().map(|m| m.as_f64()).sum();
    let m = a.tape_ref().leaf(mask.clone());
    a.sub(b)
        .square()
        .mul(m)
        .sum()
        .mul_scalar(T::from_f64(1.0 / count.max(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;
    use ndarray::arr1;

    #[test]
    fn bce_hand_value() {
        // p=0.25, target=1 -> -ln 0.25 = 1.3862943..
        let tape = Tape::<f64>::new();
        let p = tape.leaf(arr1(&[0.25]).into_dyn());
        let l = bce_loss(p, &[1]);
        assert!((l.scalar_value() - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn bce_symmetry() {
        // bce(p, 1) == bce(1-p, 0)
        let tape = Tape::<f64>::new();
        let p = tape.leaf(arr1(&[0.3]).into_dyn());
        let a = bce_loss(p, &[1]).scalar_value();
        let q = tape.leaf(arr1(&[0.7]).into_dyn());
        let b = bce_loss(q, &[0]).scalar_value();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn ce_uniform_is_log2() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(ndarray::arr2(&[[0.0, 0.0]]).into_dyn());
        let l = ce_loss(logits, &[0]);
        assert!((l.scalar_value() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn ce_quarter_prob() {
        // softmax([0, ln 3]) = [0.25, 0.75]; true class 0 -> 1.3863
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(ndarray::arr2(&[[0.0, 3.0f64.ln()]]).into_dyn());
        let l = ce_loss(logits, &[0]);
        assert!((l.scalar_value() - 1.3862943611198906).abs() < 1e-12);
    }

    #[test]
    fn ce_perfect_prediction_small() {
        let tape = Tape::<f64>::new();
        let logits = tape.leaf(ndarray::arr2(&[[30.0, 0.0]]).into_dyn());
        let l = ce_loss(logits, &[0]);
        assert!(l.scalar_value() < 1e-12);
    }

    #[test]
    fn masked_mse_counts_only_masked() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(arr1(&[1.0, 2.0]).into_dyn());
        let b = tape.leaf(arr1(&[0.0, 0.0]).into_dyn());
        let mask = arr1(&[1.0, 0.0]).into_dyn();
        let l = masked_mse(a, b, &mask);
        assert_eq!(l.scalar_value(), 1.0);
    }
}
