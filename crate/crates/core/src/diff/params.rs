//! Named parameter tensors with per-tensor Adam state.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Gradients, Tape, Var};
use super::{DiffError, Real};
use crate::rng::stream_rng;

/// Adam hyperparameters. Defaults: lr 1e-4, betas (0.9, 0.999), eps 1e-8,
/// at most 200 epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub max_epochs: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_epochs: 200,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<(), DiffError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DiffError::BadConfig(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(DiffError::BadConfig(format!("{name} must be in [0,1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

#[derive(Debug, Clone)]
struct ParamTensor<T: Real> {
    value: ArrayD<T>,
    m: ArrayD<T>,
    v: ArrayD<T>,
}

/// Ordered collection of uniquely named tensors plus optimizer state.
/// Iteration order is insertion order, which keeps updates deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet<T: Real> {
    names: Vec<String>,
    index: HashMap<String, usize>,
    tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            index: HashMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.to_string(), self.tensors.len());
        self.names.push(name.to_string());
        let zeros = ArrayD::zeros(value.raw_dim());
        self.tensors.push(ParamTensor {
            value,
            m: zeros.clone(),
            v: zeros,
        });
    }

    /// Fan-in-scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    /// Each tensor draws from its own stream derived from (seed, name), so
    /// adding or removing tensors never shifts another tensor's values.
    pub fn insert_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, seed: u64) {
        let mut rng: ChaCha8Rng = stream_rng(seed, name);
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, ArrayD::from_shape_vec(IxDyn(shape), data).unwrap());
    }

    pub fn insert_zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, ArrayD::zeros(IxDyn(shape)));
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.index.get(name).map(|&i| &self.tensors[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.index
            .get(name)
            .copied()
            .map(move |i| &mut self.tensors[i].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| (n.as_str(), &t.value))
    }

    pub fn n_coords(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Copy values (dropping optimizer state) into another precision.
    pub fn convert<U: Real>(&self) -> ParamSet<U> {
        let mut out = ParamSet::new();
        for (name, value) in self.iter() {
            out.insert(name, value.mapv(|x| U::from_f64(x.as_f64())));
        }
        out
    }

    /// Merge another set into this one. Names must stay unique.
    pub fn absorb(&mut self, other: &ParamSet<T>) {
        for (name, value) in other.iter() {
            self.insert(name, value.clone());
        }
    }

    /// Zero every tensor (optimizer state untouched).
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.value.fill(T::zero());
        }
    }

    /// Bias-corrected Adam update, one step. `t` is the 1-based step count.
    /// Gradients must cover every tensor being updated; missing entries leave
    /// the tensor (and its state) untouched.
    pub fn adam_step(
        &mut self,
        grads: &HashMap<String, ArrayD<T>>,
        cfg: &AdamConfig,
        t: u64,
    ) -> Result<(), DiffError> {
        cfg.validate()?;
        assert!(t >= 1, "adam step counter is 1-based");
        let bc1 = 1.0 - cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(t as i32);
        let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
        let lr = T::from_f64(cfg.lr);
        let eps = T::from_f64(cfg.eps);
        let (c1, c2) = (T::from_f64(1.0 / bc1), T::from_f64(1.0 / bc2));
        for (name, tensor) in self.names.iter().zip(self.tensors.iter_mut()) {
            let Some(g) = grads.get(name) else { continue };
            if g.shape() != tensor.value.shape() {
                return Err(DiffError::Shape(format!(
                    "gradient for {name} has shape {:?}, parameter is {:?}",
                    g.shape(),
                    tensor.value.shape()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NonFinite {
                    tensor: name.clone(),
                    what: "gradient".into(),
                });
            }
            ndarray::Zip::from(&mut tensor.m)
                .and(g)
                .for_each(|m, &gv| *m = b1 * *m + ob1 * gv);
            ndarray::Zip::from(&mut tensor.v)
                .and(g)
                .for_each(|v, &gv| *v = b2 * *v + ob2 * gv * gv);
            ndarray::Zip::from(&mut tensor.value)
                .and(&tensor.m)
                .and(&tensor.v)
                .for_each(|w, &m, &v| {
                    let mhat = m * c1;
                    let vhat = v * c2;
                    *w = *w - lr * mhat / (vhat.sqrt() + eps);
                });
            if tensor.value.iter().any(|x| !x.is_finite()) {
                return Err(DiffError::NonFinite {
                    tensor: name.clone(),
                    what: "parameter".into(),
                });
            }
        }
        Ok(())
    }
}

/// Parameters bound onto a tape as leaves for one forward/backward build.
pub struct BoundParams<'t, T: Real> {
    vars: HashMap<String, Var<'t, T>>,
}

impl<'t, T: Real> BoundParams<'t, T> {
    pub fn bind(tape: &'t Tape<T>, params: &ParamSet<T>) -> Self {
        let mut vars = HashMap::new();
        for (name, value) in params.iter() {
            vars.insert(name.to_string(), tape.leaf(value.clone()));
        }
        BoundParams { vars }
    }

    /// Bind several sets at once (names must be globally unique).
    pub fn bind_all(tape: &'t Tape<T>, sets: &[&ParamSet<T>]) -> Self {
        let mut vars = HashMap::new();
        for set in sets {
            for (name, value) in set.iter() {
                assert!(
                    !vars.contains_key(name),
                    "parameter name {name} bound twice"
                );
                vars.insert(name.to_string(), tape.leaf(value.clone()));
            }
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, T>, DiffError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DiffError::MissingParam(name.to_string()))
    }

    /// Collect gradients for every tensor named in `subset`, keyed by name.
    /// Tensors the graph never touched get zero gradients.
    pub fn collect_grads(
        &self,
        grads: &Gradients<T>,
        subset: &ParamSet<T>,
    ) -> HashMap<String, ArrayD<T>> {
        let mut out = HashMap::new();
        for (name, value) in subset.iter() {
            let g = self
                .vars
                .get(name)
                .and_then(|v| grads.wrt(*v))
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(value.raw_dim()));
            out.insert(name.to_string(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn zero_grads_leave_params_unchanged() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", arr1(&[1.0, -2.0]).into_dyn());
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), arr1(&[0.0, 0.0]).into_dyn());
        ps.adam_step(&grads, &AdamConfig::default(), 1).unwrap();
        assert_eq!(ps.get("w").unwrap(), &arr1(&[1.0, -2.0]).into_dyn());
    }

    #[test]
    fn first_step_closed_form() {
        // w=0, g=1, t=1: update is -lr * 1 / (1 + eps).
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", arr1(&[0.0]).into_dyn());
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), arr1(&[1.0]).into_dyn());
        let cfg = AdamConfig::default();
        ps.adam_step(&grads, &cfg, 1).unwrap();
        let expect = -1e-4 / (1.0 + 1e-8);
        let got = ps.get("w").unwrap()[[0]];
        assert!((got - expect).abs() < 1e-9, "got {got}, want {expect}");
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("w", arr1(&[0.0]).into_dyn());
        let mut grads = HashMap::new();
        grads.insert("w".to_string(), arr1(&[3.0]).into_dyn());
        let cfg = AdamConfig::default();
        let mut prev = 0.0;
        for t in 1..=5000u64 {
            ps.adam_step(&grads, &cfg, t).unwrap();
            let cur = ps.get("w").unwrap()[[0]];
            if t > 4990 {
                let step = prev - cur;
                assert!(
                    (step - cfg.lr).abs() < 1e-6,
                    "late-step size {step} should approach lr {}",
                    cfg.lr
                );
            }
            prev = cur;
        }
    }

    #[test]
    fn non_finite_grad_names_tensor() {
        let mut ps = ParamSet::<f64>::new();
        ps.insert("enc.w0", arr1(&[0.0]).into_dyn());
        let mut grads = HashMap::new();
        grads.insert("enc.w0".to_string(), arr1(&[f64::NAN]).into_dyn());
        let err = ps
            .adam_step(&grads, &AdamConfig::default(), 1)
            .unwrap_err();
        assert!(err.to_string().contains("enc.w0"), "{err}");
    }

    #[test]
    fn init_streams_are_name_stable() {
        let mut a = ParamSet::<f32>::new();
        a.insert_uniform("x", &[4], 4, 7);
        let mut b = ParamSet::<f32>::new();
        b.insert_uniform("other", &[8], 8, 7);
        b.insert_uniform("x", &[4], 4, 7);
        assert_eq!(a.get("x").unwrap(), b.get("x").unwrap());
    }
}
