//! Layer primitives. A layer owns parameter *names*; values live in a
//! [`ParamSet`] and are bound onto a tape per forward build, so the same
//! layer definition can run in f32 for training and f64 for checking.

use super::params::{BoundParams, ParamSet};
use super::tape::Var;
use super::{DiffError, Real};

fn check_last_dim<T: Real>(x: &Var<'_, T>, want: usize, ctx: &str) -> Result<(), DiffError> {
    let shape = x.shape();
    let got = *shape.last().unwrap_or(&0);
    if got != want {
        return Err(DiffError::Shape(format!(
            "{ctx}: expected trailing dim {want}, got input shape {shape:?}"
        )));
    }
    Ok(())
}

/// Fully connected layer, `y = x W + b`, input (B, in_dim).
#[derive(Debug, Clone)]
pub struct Affine {
    pub w: String,
    pub b: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Affine {
    pub fn init(ps: &mut ParamSet<f32>, name: &str, in_dim: usize, out_dim: usize, seed: u64) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.insert_uniform(&w, &[in_dim, out_dim], in_dim, seed);
        ps.insert_zeros(&b, &[out_dim]);
        Affine { w, b, in_dim, out_dim }
    }

    pub fn forward<'t, T: Real>(
        &self,
        bp: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, DiffError> {
        check_last_dim(&x, self.in_dim, "affine")?;
        Ok(x.matmul(bp.var(&self.w)?).add_bias(bp.var(&self.b)?))
    }
}

/// Strided 2-d convolution with bias, input (B, in_ch, H, W).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: String,
    pub b: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn init(
        ps: &mut ParamSet<f32>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.insert_uniform(&w, &[out_ch, in_ch, kernel, kernel], in_ch * kernel * kernel, seed);
        ps.insert_zeros(&b, &[out_ch]);
        Conv2d { w, b, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn forward<'t, T: Real>(
        &self,
        bp: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, DiffError> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_ch {
            return Err(DiffError::Shape(format!(
                "conv2d: expected (B,{},H,W), got {shape:?}",
                self.in_ch
            )));
        }
        Ok(x.conv2d(bp.var(&self.w)?, self.stride, self.pad)
            .add_bias_chan(bp.var(&self.b)?))
    }
}

/// Transposed 2-d convolution with bias, input (B, in_ch, H, W).
#[derive(Debug, Clone)]
pub struct ConvT2d {
    pub w: String,
    pub b: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvT2d {
    pub fn init(
        ps: &mut ParamSet<f32>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        seed: u64,
    ) -> Self {
        let w = format!("{name}.w");
        let b = format!("{name}.b");
        ps.insert_uniform(&w, &[in_ch, out_ch, kernel, kernel], in_ch * kernel * kernel, seed);
        ps.insert_zeros(&b, &[out_ch]);
        ConvT2d { w, b, in_ch, out_ch, kernel, stride, pad }
    }

    pub fn forward<'t, T: Real>(
        &self,
        bp: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>, DiffError> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != self.in_ch {
            return Err(DiffError::Shape(format!(
                "conv_t2d: expected (B,{},H,W), got {shape:?}",
                self.in_ch
            )));
        }
        Ok(x.conv_transpose2d(bp.var(&self.w)?, self.stride, self.pad)
            .add_bias_chan(bp.var(&self.b)?))
    }
}

/// Gated recurrent cell fusing a short sequence of feature vectors.
///
/// Standard formulation with separate input/hidden projections:
/// r = sigma(x Wxr + h Whr + br), z = sigma(x Wxz + h Whz + bz),
/// n = tanh(x Wxn + r * (h Whn + bn)), h' = (1-z)*n + z*h.
#[derive(Debug, Clone)]
pub struct GruCell {
    pub xr: Affine,
    pub hr: Affine,
    pub xz: Affine,
    pub hz: Affine,
    pub xn: Affine,
    pub hn: Affine,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn init(ps: &mut ParamSet<f32>, name: &str, input: usize, hidden: usize, seed: u64) -> Self {
        GruCell {
            xr: Affine::init(ps, &format!("{name}.xr"), input, hidden, seed),
            hr: Affine::init(ps, &format!("{name}.hr"), hidden, hidden, seed),
            xz: Affine::init(ps, &format!("{name}.xz"), input, hidden, seed),
            hz: Affine::init(ps, &format!("{name}.hz"), hidden, hidden, seed),
            xn: Affine::init(ps, &format!("{name}.xn"), input, hidden, seed),
            hn: Affine::init(ps, &format!("{name}.hn"), hidden, hidden, seed),
            input,
            hidden,
        }
    }

    pub fn step<'t, T: Real>(
        &self,
        bp: &BoundParams<'t, T>,
        x: Var<'t, T>,
        h: Var<'t, T>,
    ) -> Result<Var<'t, T>, DiffError> {
        check_last_dim(&x, self.input, "gru input")?;
        check_last_dim(&h, self.hidden, "gru hidden")?;
        let r = self.xr.forward(bp, x)?.add(self.hr.forward(bp, h)?).sigmoid();
        let z = self.xz.forward(bp, x)?.add(self.hz.forward(bp, h)?).sigmoid();
        let n = self.xn.forward(bp, x)?.add(r.mul(self.hn.forward(bp, h)?)).tanh();
        Ok(z.one_minus().mul(n).add(z.mul(h)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Tape;
    use ndarray::{arr1, arr2, Array2};

    #[test]
    fn affine_identity_passthrough() {
        let mut ps = ParamSet::<f32>::new();
        let layer = Affine::init(&mut ps, "id", 2, 2, 0);
        *ps.get_mut("id.w").unwrap() = arr2(&[[1.0f32, 0.0], [0.0, 1.0]]).into_dyn();
        let tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&tape, &ps);
        let x = tape.leaf(arr2(&[[3.0f32, -4.0]]).into_dyn());
        let y = layer.forward(&bp, x).unwrap();
        assert_eq!(y.value(), arr2(&[[3.0f32, -4.0]]).into_dyn());
    }

    #[test]
    fn affine_rejects_bad_width() {
        let mut ps = ParamSet::<f32>::new();
        let layer = Affine::init(&mut ps, "a", 3, 2, 0);
        let tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&tape, &ps);
        let x = tape.leaf(arr2(&[[1.0f32, 2.0]]).into_dyn());
        assert!(layer.forward(&bp, x).is_err());
    }

    #[test]
    fn gru_zero_params_halve_state() {
        // With all-zero parameters: r=z=0.5, n=0, h' = 0.5*h.
        let mut ps = ParamSet::<f32>::new();
        let cell = GruCell::init(&mut ps, "g", 2, 2, 0);
        for name in ps.names().to_vec() {
            ps.get_mut(&name).unwrap().fill(0.0);
        }
        let tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&tape, &ps);
        let x = tape.leaf(arr2(&[[1.0f32, 1.0]]).into_dyn());
        let h = tape.leaf(arr2(&[[0.6f32, -0.4]]).into_dyn());
        let h2 = cell.step(&bp, x, h).unwrap();
        let v = h2.value();
        assert!((v[[0, 0]] - 0.3).abs() < 1e-6);
        assert!((v[[0, 1]] + 0.2).abs() < 1e-6);
    }

    #[test]
    fn conv_layer_shape() {
        let mut ps = ParamSet::<f32>::new();
        let conv = Conv2d::init(&mut ps, "c", 1, 4, 4, 2, 1, 9);
        let tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&tape, &ps);
        let x = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 1, 32, 32])));
        let y = conv.forward(&bp, x).unwrap();
        assert_eq!(y.shape(), vec![2, 4, 16, 16]);
    }

    #[test]
    fn conv_transpose_layer_shape() {
        let mut ps = ParamSet::<f32>::new();
        let tc = ConvT2d::init(&mut ps, "t", 4, 1, 4, 2, 1, 9);
        let tape = Tape::<f32>::new();
        let bp = BoundParams::bind(&tape, &ps);
        let x = tape.leaf(ndarray::ArrayD::zeros(ndarray::IxDyn(&[2, 4, 16, 16])));
        let y = tc.forward(&bp, x).unwrap();
        assert_eq!(y.shape(), vec![2, 1, 32, 32]);
    }

    #[test]
    fn forward_is_deterministic() {
        let mut ps = ParamSet::<f32>::new();
        let layer = Affine::init(&mut ps, "d", 8, 3, 123);
        let x_data: Array2<f32> = Array2::from_shape_fn((4, 8), |(i, j)| (i * 8 + j) as f32 * 0.01);
        let run = || {
            let tape = Tape::<f32>::new();
            let bp = BoundParams::bind(&tape, &ps);
            let x = tape.leaf(x_data.clone().into_dyn());
            layer.forward(&bp, x).unwrap().value()
        };
        assert_eq!(run(), run());
        let _ = arr1(&[0.0f32]); // keep import used in both cfgs
    }
}
