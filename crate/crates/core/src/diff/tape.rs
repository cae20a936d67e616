//! Reverse-mode automatic differentiation over dynamically shaped tensors.
//!
//! A [`Tape`] is an append-only arena of nodes. Building an expression pushes
//! nodes; [`Tape::backward`] walks the arena in reverse creation order and
//! accumulates gradients. Variables are cheap copyable handles into the arena.
//!
//! Scalar reductions ([`Var::sum`], [`Var::mean`], cross-entropy) accumulate
//! in 64-bit regardless of the storage type.

use std::cell::RefCell;
use std::fmt;

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayD, Axis, Ix1, Ix2, Ix4, IxDyn, Slice};

use super::convops::{col2im, conv_out_dim, im2col};
use super::Real;

/// One recorded operation. Parents are indices into the tape arena.
#[derive(Debug, Clone)]
enum Op<T: Real> {
    /// Input node. Only trainable leaves receive gradients callers care about,
    /// but gradients are propagated to constants too (harmless, simpler).
    Leaf,
    Add,
    Sub,
    Mul,
    AddScalar(T),
    MulScalar(T),
    /// (M,K) x (K,N) matrix product.
    MatMul,
    /// (B,K) + (K) row-broadcast bias.
    AddBias,
    /// (B,C,H,W) + (C) channel-broadcast bias.
    AddBiasChan,
    Conv2d { stride: usize, pad: usize },
    ConvT2d { stride: usize, pad: usize },
    Relu,
    LeakyRelu(T),
    Sigmoid,
    Tanh,
    /// ln(clamp(x, eps, 1-eps)); zero gradient outside the clamp window.
    LogClamped(T),
    Sum,
    Mean,
    Concat { axis: usize },
    /// (B,K) -> (B,K,H,W) spatial replication.
    BroadcastHw,
    Reshape,
    /// Mean cross-entropy of 2-class (or C-class) logits against integer labels.
    CrossEntropyLogits { labels: Vec<usize> },
    /// Identity forward, gradient scaled by the factor on the way back.
    GradScale(T),
}

#[derive(Debug)]
struct Node<T: Real> {
    value: ArrayD<T>,
    parents: Vec<usize>,
    op: Op<T>,
}

/// Arena of recorded operations.
pub struct Tape<T: Real> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tape({} nodes)", self.nodes.borrow().len())
    }
}

/// Handle to a tape node.
#[derive(Debug)]
pub struct Var<'t, T: Real> {
    tape: &'t Tape<T>,
    idx: usize,
}

impl<T: Real> Clone for Var<'_, T> {
    fn clone(&self) -> Self {
        *self
    }
}
impl<T: Real> Copy for Var<'_, T> {}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the backward root with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var<'_, T>) -> Option<&ArrayD<T>> {
        self.grads.get(v.idx).and_then(|g| g.as_ref())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<T>, parents: Vec<usize>, op: Op<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, parents, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Insert an input node. Constants and parameters are both leaves; what
    /// makes a parameter trainable is that the caller asks for its gradient.
    pub fn leaf(&self, value: ArrayD<T>) -> Var<'_, T> {
        self.push(value, vec![], Op::Leaf)
    }

    /// Leaf from a 0-d scalar.
    pub fn scalar(&self, value: T) -> Var<'_, T> {
        self.leaf(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn value_of(&self, idx: usize) -> ArrayD<T> {
        self.nodes.borrow()[idx].value.clone()
    }

    fn shape_of(&self, idx: usize) -> Vec<usize> {
        self.nodes.borrow()[idx].value.shape().to_vec()
    }

    /// Reverse pass from a scalar root. Gradients are accumulated in reverse
    /// creation order, which is deterministic.
    pub fn backward(&self, root: Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(
            nodes[root.idx].value.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            nodes[root.idx].value.shape()
        );
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; nodes.len()];
        grads[root.idx] = Some(ArrayD::from_elem(
            nodes[root.idx].value.raw_dim(),
            T::one(),
        ));
        for idx in (0..=root.idx).rev() {
            let Some(grad) = grads[idx].clone() else {
                continue;
            };
            let node = &nodes[idx];
            let parent_grads = backward_op(node, &nodes, &grad);
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                match &mut grads[*p] {
                    Some(acc) => *acc += &pg,
                    slot => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

impl<'t, T: Real> Var<'t, T> {
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn tape_ref(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(&self) -> ArrayD<T> {
        self.tape.value_of(self.idx)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.shape_of(self.idx)
    }

    /// Scalar payload of a 0-d (or single-element) node.
    pub fn scalar_value(&self) -> T {
        let v = self.value();
        assert_eq!(v.len(), 1, "scalar_value on shape {:?}", v.shape());
        *v.iter().next().unwrap()
    }

    fn same_shape(&self, other: &Var<'t, T>, what: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&rhs, "add");
        let v = self.value() + &rhs.value();
        self.tape.push(v, vec![self.idx, rhs.idx], Op::Add)
    }

    pub fn sub(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&rhs, "sub");
        let v = self.value() - &rhs.value();
        self.tape.push(v, vec![self.idx, rhs.idx], Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        self.same_shape(&rhs, "mul");
        let v = self.value() * &rhs.value();
        self.tape.push(v, vec![self.idx, rhs.idx], Op::Mul)
    }

    pub fn add_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x + c);
        self.tape.push(v, vec![self.idx], Op::AddScalar(c))
    }

    pub fn mul_scalar(self, c: T) -> Var<'t, T> {
        let v = self.value().mapv(|x| x * c);
        self.tape.push(v, vec![self.idx], Op::MulScalar(c))
    }

    pub fn neg(self) -> Var<'t, T> {
        self.mul_scalar(-T::one())
    }

    pub fn square(self) -> Var<'t, T> {
        self.mul(self)
    }

    /// 1 - x, elementwise.
    pub fn one_minus(self) -> Var<'t, T> {
        self.mul_scalar(-T::one()).add_scalar(T::one())
    }

    pub fn matmul(self, rhs: Var<'t, T>) -> Var<'t, T> {
        let a = self.value();
        let b = rhs.value();
        let a2 = a.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-d");
        let b2 = b.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-d");
        assert_eq!(
            a2.ncols(),
            b2.nrows(),
            "matmul inner dims {} vs {}",
            a2.ncols(),
            b2.nrows()
        );
        let mut out = Array2::<T>::zeros((a2.nrows(), b2.ncols()));
        general_mat_mul(T::one(), &a2, &b2, T::zero(), &mut out);
        self.tape
            .push(out.into_dyn(), vec![self.idx, rhs.idx], Op::MatMul)
    }

    /// (B,K) + (K) bias.
    pub fn add_bias(self, bias: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let b = bias.value();
        let x2 = x.view().into_dimensionality::<Ix2>().expect("add_bias input 2-d");
        let b1 = b.view().into_dimensionality::<Ix1>().expect("add_bias bias 1-d");
        assert_eq!(x2.ncols(), b1.len(), "add_bias width mismatch");
        let v = &x2 + &b1;
        self.tape
            .push(v.into_dyn(), vec![self.idx, bias.idx], Op::AddBias)
    }

    /// (B,C,H,W) + (C) per-channel bias.
    pub fn add_bias_chan(self, bias: Var<'t, T>) -> Var<'t, T> {
        let x = self.value();
        let b = bias.value();
        let x4 = x.view().into_dimensionality::<Ix4>().expect("add_bias_chan input 4-d");
        let b1 = b.view().into_dimensionality::<Ix1>().expect("add_bias_chan bias 1-d");
        let (_, c, _, _) = x4.dim();
        assert_eq!(c, b1.len(), "add_bias_chan channel mismatch");
        let mut v = x4.to_owned();
        for (ci, mut chan) in v.axis_iter_mut(Axis(1)).enumerate() {
            chan.mapv_inplace(|x| x + b1[ci]);
        }
        self.tape
            .push(v.into_dyn(), vec![self.idx, bias.idx], Op::AddBiasChan)
    }

    /// 2-d convolution, input (B,Cin,H,W), weight (Cout,Cin,k,k), zero padding.
    pub fn conv2d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let x4 = x.view().into_dimensionality::<Ix4>().expect("conv2d input 4-d");
        let w4 = w.view().into_dimensionality::<Ix4>().expect("conv2d weight 4-d");
        let (bsz, cin, h, wd) = x4.dim();
        let (cout, wcin, k, k2) = w4.dim();
        assert_eq!(k, k2, "conv2d kernel must be square");
        assert_eq!(cin, wcin, "conv2d channel mismatch {cin} vs {wcin}");
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let wflat = w4.to_shape((cout, cin * k * k)).unwrap().to_owned();
        let mut out = Array4::<T>::zeros((bsz, cout, ho, wo));
        for bi in 0..bsz {
            let cols = im2col(x4.index_axis(Axis(0), bi), k, stride, pad);
            let mut ob = Array2::<T>::zeros((cout, ho * wo));
            general_mat_mul(T::one(), &wflat.view(), &cols.view(), T::zero(), &mut ob);
            out.index_axis_mut(Axis(0), bi)
                .assign(&ob.to_shape((cout, ho, wo)).unwrap());
        }
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, weight.idx],
            Op::Conv2d { stride, pad },
        )
    }

    /// Transposed 2-d convolution, input (B,Cin,H,W), weight (Cin,Cout,k,k).
    pub fn conv_transpose2d(self, weight: Var<'t, T>, stride: usize, pad: usize) -> Var<'t, T> {
        let x = self.value();
        let w = weight.value();
        let x4 = x.view().into_dimensionality::<Ix4>().expect("conv_t2d input 4-d");
        let w4 = w.view().into_dimensionality::<Ix4>().expect("conv_t2d weight 4-d");
        let (bsz, cin, h, wd) = x4.dim();
        let (wcin, cout, k, k2) = w4.dim();
        assert_eq!(k, k2, "conv_t2d kernel must be square");
        assert_eq!(cin, wcin, "conv_t2d channel mismatch {cin} vs {wcin}");
        let ho = (h - 1) * stride + k - 2 * pad;
        let wo = (wd - 1) * stride + k - 2 * pad;
        let wflat = w4.to_shape((cin, cout * k * k)).unwrap().to_owned();
        let mut out = Array4::<T>::zeros((bsz, cout, ho, wo));
        for bi in 0..bsz {
            let xb = x4
                .index_axis(Axis(0), bi)
                .to_shape((cin, h * wd))
                .unwrap()
                .to_owned();
            let mut cols = Array2::<T>::zeros((cout * k * k, h * wd));
            general_mat_mul(T::one(), &wflat.t(), &xb.view(), T::zero(), &mut cols);
            let ob = col2im(cols.view(), cout, ho, wo, k, stride, pad);
            out.index_axis_mut(Axis(0), bi).assign(&ob);
        }
        self.tape.push(
            out.into_dyn(),
            vec![self.idx, weight.idx],
            Op::ConvT2d { stride, pad },
        )
    }

    pub fn relu(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.tape.push(v, vec![self.idx], Op::Relu)
    }

    pub fn leaky_relu(self, slope: T) -> Var<'t, T> {
        let v = self
            .value()
            .mapv(|x| if x > T::zero() { x } else { x * slope });
        self.tape.push(v, vec![self.idx], Op::LeakyRelu(slope))
    }

    pub fn sigmoid(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| T::one() / (T::one() + (-x).exp()));
        self.tape.push(v, vec![self.idx], Op::Sigmoid)
    }

    pub fn tanh(self) -> Var<'t, T> {
        let v = self.value().mapv(|x| x.tanh());
        self.tape.push(v, vec![self.idx], Op::Tanh)
    }

    /// ln(clamp(x, eps, 1-eps)). The clamp keeps the adversarial log terms
    /// finite when a discriminator saturates.
    pub fn log_clamped(self, eps: T) -> Var<'t, T> {
        let lo = eps;
        let hi = T::one() - eps;
        let v = self.value().mapv(|x| clamp(x, lo, hi).ln());
        self.tape.push(v, vec![self.idx], Op::LogClamped(eps))
    }

    /// Sum of all elements to a 0-d scalar, accumulated in f64.
    pub fn sum(self) -> Var<'t, T> {
        let acc: f64 = self.value().iter().map(|x| x.as_f64()).sum();
        let v = ArrayD::from_elem(IxDyn(&[]), T::from_f64(acc));
        self.tape.push(v, vec![self.idx], Op::Sum)
    }

    /// Mean of all elements to a 0-d scalar, accumulated in f64.
    pub fn mean(self) -> Var<'t, T> {
        let val = self.value();
        let n = val.len();
        assert!(n > 0, "mean of empty tensor");
        let acc: f64 = val.iter().map(|x| x.as_f64()).sum();
        let v = ArrayD::from_elem(IxDyn(&[]), T::from_f64(acc / n as f64));
        self.tape.push(v, vec![self.idx], Op::Mean)
    }

    /// Concatenate along `axis`. All parts must agree on the other axes.
    pub fn concat(axis: usize, parts: &[Var<'t, T>]) -> Var<'t, T> {
        assert!(!parts.is_empty(), "concat of zero parts");
        if parts.len() == 1 {
            return parts[0];
        }
        let tape = parts[0].tape;
        let values: Vec<ArrayD<T>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shape mismatch");
        tape.push(
            out,
            parts.iter().map(|p| p.idx).collect(),
            Op::Concat { axis },
        )
    }

    /// (B,K) -> (B,K,h,w) replication.
    pub fn broadcast_hw(self, h: usize, w: usize) -> Var<'t, T> {
        let x = self.value();
        let x2 = x.view().into_dimensionality::<Ix2>().expect("broadcast_hw input 2-d");
        let (bsz, k) = x2.dim();
        let mut out = Array4::<T>::zeros((bsz, k, h, w));
        for bi in 0..bsz {
            for ki in 0..k {
                out.index_axis_mut(Axis(0), bi)
                    .index_axis_mut(Axis(0), ki)
                    .fill(x2[[bi, ki]]);
            }
        }
        self.tape
            .push(out.into_dyn(), vec![self.idx], Op::BroadcastHw)
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'t, T> {
        let v = self.value();
        assert_eq!(
            v.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?} element count mismatch",
            v.shape(),
            shape
        );
        let out = v.to_shape(IxDyn(shape)).unwrap().to_owned();
        self.tape.push(out, vec![self.idx], Op::Reshape)
    }

    /// Mean cross-entropy of (B,C) logits against integer labels, via a fused
    /// log-sum-exp evaluated in f64.
    pub fn cross_entropy_logits(self, labels: &[usize]) -> Var<'t, T> {
        let v = self.value();
        let l2 = v.view().into_dimensionality::<Ix2>().expect("ce logits 2-d");
        let (bsz, ncls) = l2.dim();
        assert_eq!(bsz, labels.len(), "ce batch/label mismatch");
        assert!(labels.iter().all(|&y| y < ncls), "ce label out of range");
        let mut acc = 0.0f64;
        for (bi, &y) in labels.iter().enumerate() {
            let row: Vec<f64> = l2.row(bi).iter().map(|x| x.as_f64()).collect();
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            acc += lse - row[y];
        }
        let out = ArrayD::from_elem(IxDyn(&[]), T::from_f64(acc / bsz as f64));
        self.tape.push(
            out,
            vec![self.idx],
            Op::CrossEntropyLogits {
                labels: labels.to_vec(),
            },
        )
    }

    /// Identity forward; backward multiplies the gradient by `factor`.
    /// `factor = 0` detaches, other factors are used for fault injection in
    /// gradient-checker tests.
    pub fn grad_scale(self, factor: T) -> Var<'t, T> {
        let v = self.value();
        self.tape.push(v, vec![self.idx], Op::GradScale(factor))
    }
}

fn clamp<T: Real>(x: T, lo: T, hi: T) -> T {
    if x < lo {
        lo
    } else if x > hi {
        hi
    } else {
        x
    }
}

/// Gradient contributions for each parent of `node` given the output gradient.
fn backward_op<T: Real>(node: &Node<T>, nodes: &[Node<T>], grad: &ArrayD<T>) -> Vec<ArrayD<T>> {
    let pval = |i: usize| -> &ArrayD<T> { &nodes[node.parents[i]].value };
    match &node.op {
        Op::Leaf => vec![],
        Op::Add => vec![grad.clone(), grad.clone()],
        Op::Sub => vec![grad.clone(), grad.mapv(|g| -g)],
        Op::Mul => vec![grad * pval(1), grad * pval(0)],
        Op::AddScalar(_) => vec![grad.clone()],
        Op::MulScalar(c) => vec![grad.mapv(|g| g * *c)],
        Op::GradScale(c) => vec![grad.mapv(|g| g * *c)],
        Op::MatMul => {
            let a = pval(0).view().into_dimensionality::<Ix2>().unwrap();
            let b = pval(1).view().into_dimensionality::<Ix2>().unwrap();
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut da = Array2::<T>::zeros(a.dim());
            let mut db = Array2::<T>::zeros(b.dim());
            general_mat_mul(T::one(), &g, &b.t(), T::zero(), &mut da);
            general_mat_mul(T::one(), &a.t(), &g, T::zero(), &mut db);
            vec![da.into_dyn(), db.into_dyn()]
        }
        Op::AddBias => {
            let g = grad.view().into_dimensionality::<Ix2>().unwrap();
            let db = g.sum_axis(Axis(0));
            vec![grad.clone(), db.into_dyn()]
        }
        Op::AddBiasChan => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let db = g.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
            vec![grad.clone(), db.into_dyn()]
        }
        Op::Conv2d { stride, pad } => {
            let x = pval(0).view().into_dimensionality::<Ix4>().unwrap();
            let w = pval(1).view().into_dimensionality::<Ix4>().unwrap();
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (bsz, cin, h, wd) = x.dim();
            let (cout, _, k, _) = w.dim();
            let (_, _, ho, wo) = g.dim();
            let wflat = w.to_shape((cout, cin * k * k)).unwrap().to_owned();
            let mut dx = Array4::<T>::zeros((bsz, cin, h, wd));
            let mut dwflat = Array2::<T>::zeros((cout, cin * k * k));
            for bi in 0..bsz {
                let cols = im2col(x.index_axis(Axis(0), bi), k, *stride, *pad);
                let gb = g
                    .index_axis(Axis(0), bi)
                    .to_shape((cout, ho * wo))
                    .unwrap()
                    .to_owned();
                general_mat_mul(T::one(), &gb.view(), &cols.t(), T::one(), &mut dwflat);
                let mut dcols = Array2::<T>::zeros((cin * k * k, ho * wo));
                general_mat_mul(T::one(), &wflat.t(), &gb.view(), T::zero(), &mut dcols);
                dx.index_axis_mut(Axis(0), bi)
                    .assign(&col2im(dcols.view(), cin, h, wd, k, *stride, *pad));
            }
            let dw = dwflat.to_shape((cout, cin, k, k)).unwrap().to_owned();
            vec![dx.into_dyn(), dw.into_dyn()]
        }
        Op::ConvT2d { stride, pad } => {
            let x = pval(0).view().into_dimensionality::<Ix4>().unwrap();
            let w = pval(1).view().into_dimensionality::<Ix4>().unwrap();
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let (bsz, cin, h, wd) = x.dim();
            let (_, cout, k, _) = w.dim();
            let wflat = w.to_shape((cin, cout * k * k)).unwrap().to_owned();
            let mut dx = Array4::<T>::zeros((bsz, cin, h, wd));
            let mut dwflat = Array2::<T>::zeros((cin, cout * k * k));
            for bi in 0..bsz {
                // col2im and im2col are adjoint, so the gradient through the
                // scatter is a gather over the output gradient.
                let dcols = im2col(g.index_axis(Axis(0), bi), k, *stride, *pad);
                let xb = x
                    .index_axis(Axis(0), bi)
                    .to_shape((cin, h * wd))
                    .unwrap()
                    .to_owned();
                general_mat_mul(T::one(), &xb.view(), &dcols.t(), T::one(), &mut dwflat);
                let mut dxb = Array2::<T>::zeros((cin, h * wd));
                general_mat_mul(T::one(), &wflat.view(), &dcols.view(), T::zero(), &mut dxb);
                dx.index_axis_mut(Axis(0), bi)
                    .assign(&dxb.to_shape((cin, h, wd)).unwrap());
            }
            let dw = dwflat.to_shape((cin, cout, k, k)).unwrap().to_owned();
            vec![dx.into_dyn(), dw.into_dyn()]
        }
        Op::Relu => {
            let x = pval(0);
            let mut dx = grad.clone();
            ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                if xv <= T::zero() {
                    *d = T::zero();
                }
            });
            vec![dx]
        }
        Op::LeakyRelu(slope) => {
            let x = pval(0);
            let mut dx = grad.clone();
            ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                if xv <= T::zero() {
                    *d = *d * *slope;
                }
            });
            vec![dx]
        }
        Op::Sigmoid => {
            let y = &node.value;
            let mut dx = grad.clone();
            ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
                *d = *d * yv * (T::one() - yv);
            });
            vec![dx]
        }
        Op::Tanh => {
            let y = &node.value;
            let mut dx = grad.clone();
            ndarray::Zip::from(&mut dx).and(y).for_each(|d, &yv| {
                *d = *d * (T::one() - yv * yv);
            });
            vec![dx]
        }
        Op::LogClamped(eps) => {
            let x = pval(0);
            let lo = *eps;
            let hi = T::one() - *eps;
            let mut dx = grad.clone();
            ndarray::Zip::from(&mut dx).and(x).for_each(|d, &xv| {
                *d = if xv < lo || xv > hi {
                    T::zero()
                } else {
                    *d / xv
                };
            });
            vec![dx]
        }
        Op::Sum => {
            let g = *grad.iter().next().unwrap();
            vec![ArrayD::from_elem(pval(0).raw_dim(), g)]
        }
        Op::Mean => {
            let n = pval(0).len();
            let g = *grad.iter().next().unwrap() / T::from_f64(n as f64);
            vec![ArrayD::from_elem(pval(0).raw_dim(), g)]
        }
        Op::Concat { axis } => {
            let mut out = Vec::with_capacity(node.parents.len());
            let mut start = 0isize;
            for &p in &node.parents {
                let w = nodes[p].value.shape()[*axis] as isize;
                let piece = grad
                    .slice_axis(Axis(*axis), Slice::new(start, Some(start + w), 1))
                    .to_owned();
                out.push(piece);
                start += w;
            }
            out
        }
        Op::BroadcastHw => {
            let g = grad.view().into_dimensionality::<Ix4>().unwrap();
            let dx = g.sum_axis(Axis(3)).sum_axis(Axis(2));
            vec![dx.into_dyn()]
        }
        Op::Reshape => {
            let dx = grad.to_shape(pval(0).raw_dim()).unwrap().to_owned();
            vec![dx]
        }
        Op::CrossEntropyLogits { labels } => {
            let l2 = pval(0).view().into_dimensionality::<Ix2>().unwrap();
            let (bsz, ncls) = l2.dim();
            let gscale = grad.iter().next().unwrap().as_f64() / bsz as f64;
            let mut dl = Array2::<T>::zeros((bsz, ncls));
            for (bi, &y) in labels.iter().enumerate() {
                let row: Vec<f64> = l2.row(bi).iter().map(|x| x.as_f64()).collect();
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|x| (x - m).exp()).sum();
                for c in 0..ncls {
                    let p = (row[c] - m).exp() / denom;
                    let ind = if c == y { 1.0 } else { 0.0 };
                    dl[[bi, c]] = T::from_f64((p - ind) * gscale);
                }
            }
            vec![dl.into_dyn()]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2};

    fn dynify<D: ndarray::Dimension>(a: ndarray::Array<f64, D>) -> ArrayD<f64> {
        a.into_dyn()
    }

    #[test]
    fn add_mul_backward() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(dynify(arr1(&[1.0, 2.0])));
        let b = tape.leaf(dynify(arr1(&[3.0, 4.0])));
        let y = a.mul(b).sum(); // y = a.b
        assert_eq!(y.scalar_value(), 11.0);
        let g = tape.backward(y);
        assert_eq!(g.wrt(a).unwrap(), &dynify(arr1(&[3.0, 4.0])));
        assert_eq!(g.wrt(b).unwrap(), &dynify(arr1(&[1.0, 2.0])));
    }

    #[test]
    fn square_accumulates_both_paths() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(dynify(arr1(&[3.0])));
        let y = a.square().sum();
        let g = tape.backward(y);
        assert_eq!(g.wrt(a).unwrap()[[0]], 6.0);
    }

    #[test]
    fn matmul_shapes_and_grad() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(dynify(arr2(&[[1.0, 2.0], [3.0, 4.0]])));
        let b = tape.leaf(dynify(arr2(&[[1.0], [1.0]])));
        let y = a.matmul(b).sum();
        assert_eq!(y.scalar_value(), 10.0);
        let g = tape.backward(y);
        assert_eq!(g.wrt(a).unwrap(), &dynify(arr2(&[[1.0, 1.0], [1.0, 1.0]])));
        assert_eq!(g.wrt(b).unwrap(), &dynify(arr2(&[[4.0], [6.0]])));
    }

    #[test]
    fn relu_forward() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(dynify(arr1(&[-1.0, 2.0])));
        let y = a.relu();
        assert_eq!(y.value(), dynify(arr1(&[0.0, 2.0])));
    }

    #[test]
    fn conv2d_all_ones_valid() {
        // 3x3 kernel of ones over an all-ones 5x5 input, valid padding -> all-9 3x3.
        let tape = Tape::<f64>::new();
        let x = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 5, 5]), 1.0));
        let w = tape.leaf(ArrayD::from_elem(IxDyn(&[1, 1, 3, 3]), 1.0));
        let y = x.conv2d(w, 1, 0);
        assert_eq!(y.shape(), vec![1, 1, 3, 3]);
        assert!(y.value().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn concat_split_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(dynify(arr2(&[[1.0, 2.0]])));
        let b = tape.leaf(dynify(arr2(&[[3.0]])));
        let y = Var::concat(1, &[a, b]);
        assert_eq!(y.shape(), vec![1, 3]);
        let s = y.mul_scalar(2.0).sum();
        let g = tape.backward(s);
        assert_eq!(g.wrt(a).unwrap(), &dynify(arr2(&[[2.0, 2.0]])));
        assert_eq!(g.wrt(b).unwrap(), &dynify(arr2(&[[2.0]])));
    }

    #[test]
    fn grad_scale_identity_forward_scaled_back() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(dynify(arr1(&[2.0])));
        let y = a.grad_scale(0.5).sum();
        assert_eq!(y.scalar_value(), 2.0);
        let g = tape.backward(y);
        assert_eq!(g.wrt(a).unwrap()[[0]], 0.5);
    }

    #[test]
    #[should_panic(expected = "shape mismatch")]
    fn add_shape_mismatch_panics() {
        let tape = Tape::<f64>::new();
        let a = tape.leaf(dynify(arr1(&[1.0, 2.0])));
        let b = tape.leaf(dynify(arr1(&[1.0])));
        let _ = a.add(b);
    }
}
