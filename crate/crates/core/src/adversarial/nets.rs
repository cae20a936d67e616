//! Pinned desk-scale topologies and the adversarial forward graphs.
//!
//! Factor modality (target A = factors, conditional B = image):
//!   encoder_a: 4 dense layers over [x*m ; m], relu hidden, linear out.
//!   encoder_b: 3 stride-2 convs + affine over the conditioning patch.
//!   decoder_a: 4 dense layers over the joint latent, sigmoid out.
//!   discriminator: latent projection + 3 dense layers over [x ; m ; proj(z)].
//!   classifier: 2 dense hidden layers + readout.
//!
//! Image modality (target A = current-timepoint patch, conditional B =
//! factors): encoder_a is a 3-stage conv over the background patch whose
//! stage outputs feed skip connections into the mirrored transpose-conv
//! decoder; the discriminator consumes (x, mask channel, z projected and
//! broadcast to 4 spatial channels); the classifier is 2 conv stages +
//! affine.

use ndarray::{ArrayD, IxDyn};

use super::{AdversarialBundle, BundleConfig, GanError, TargetModality};
use crate::data::{FACTOR_COUNT, IMG_SIZE};
use crate::diff::layers::{Affine, Conv2d, ConvT2d};
use crate::diff::loss::{ce_loss, masked_mse};
use crate::diff::{BoundParams, DiffError, ParamSet, Real, Tape, Var, PROB_EPS};

/// Weight of the latent-magnitude term in the generator objective. Encoder
/// codes compete against unit-normal noise inside the discriminator; without
/// a scale anchor the minimax admits a degenerate escape where codes blow
/// up until every log term sits on its clamp floor and gradients die. The
/// penalty mean(z^2) * LAMBDA_LATENT keeps codes in the prior's range.
pub const LAMBDA_LATENT: f64 = 1e-2;

/// Conv channel progression of every image encoder/discriminator stack.
pub const IMG_ENC_CH: [usize; 3] = [16, 32, 64];
/// Dense width of factor-side stacks.
pub const DENSE_WIDTH: usize = 64;
/// Discriminator latent-projection width (factor modality).
pub const DISC_ZPROJ_FACTOR: usize = 32;
/// Discriminator latent-projection channels (image modality).
pub const DISC_ZPROJ_IMG_CH: usize = 4;
/// Classifier widths.
pub const CLF_DENSE: usize = 32;
pub const CLF_IMG_CH: [usize; 2] = [8, 16];
/// Decoder deconv channel progression (before skip concatenation).
pub const DEC_CH: [usize; 3] = [32, 16, 8];

#[derive(Debug, Clone)]
pub(crate) struct ImgEncArch {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    fc: Affine,
}

impl ImgEncArch {
    fn init(ps: &mut ParamSet<f32>, name: &str, out_dim: usize, seed: u64) -> Self {
        ImgEncArch {
            c1: Conv2d::init(ps, &format!("{name}.c1"), 1, IMG_ENC_CH[0], 4, 2, 1, seed),
            c2: Conv2d::init(ps, &format!("{name}.c2"), IMG_ENC_CH[0], IMG_ENC_CH[1], 4, 2, 1, seed),
            c3: Conv2d::init(ps, &format!("{name}.c3"), IMG_ENC_CH[1], IMG_ENC_CH[2], 4, 2, 1, seed),
            fc: Affine::init(ps, &format!("{name}.fc"), IMG_ENC_CH[2] * 16, out_dim, seed),
        }
    }

    /// Returns (latent, [stage1, stage2, stage3]) with post-activation skips.
    fn forward<'t, T: Real>(
        &self,
        bp: &BoundParams<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, [Var<'t, T>; 3]), DiffError> {
        let bsz = x.shape()[0];
        let s1 = self.c1.forward(bp, x)?.relu();
        let s2 = self.c2.forward(bp, s1)?.relu();
        let s3 = self.c3.forward(bp, s2)?.relu();
        let z = self.fc.forward(bp, s3.reshape(&[bsz, IMG_ENC_CH[2] * 16]))?;
        Ok((z, [s1, s2, s3]))
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FactorArch {
    enc_a: [Affine; 4],
    enc_b: Option<ImgEncArch>,
    dec_a: [Affine; 4],
    disc_zproj: Affine,
    disc: [Affine; 3],
    clf: Option<[Affine; 3]>,
}

#[derive(Debug, Clone)]
pub(crate) struct ImageArch {
    enc_a: ImgEncArch,
    enc_b: Option<[Affine; 4]>,
    dec_fc: Affine,
    dec_t1: ConvT2d,
    dec_t2: ConvT2d,
    dec_t3: ConvT2d,
    dec_out: Conv2d,
    disc_zproj: Affine,
    disc_c: [Conv2d; 3],
    disc_fc: Affine,
    clf: Option<(Conv2d, Conv2d, Affine)>,
}

#[derive(Debug, Clone)]
pub(crate) enum Arch {
    Factor(FactorArch),
    Image(ImageArch),
}

pub(crate) fn init_bundle(cfg: BundleConfig) -> AdversarialBundle {
    let seed = cfg.seed;
    let mut encoder_a = ParamSet::new();
    let mut encoder_b = ParamSet::new();
    let mut decoder_a = ParamSet::new();
    let mut discriminator = ParamSet::new();
    let mut classifier = ParamSet::new();
    let d_joint = cfg.d_joint();

    let arch = match cfg.target {
        TargetModality::Factors => {
            let f2 = 2 * FACTOR_COUNT;
            let enc_a = [
                Affine::init(&mut encoder_a, "enc_a.l1", f2, DENSE_WIDTH, seed),
                Affine::init(&mut encoder_a, "enc_a.l2", DENSE_WIDTH, DENSE_WIDTH, seed),
                Affine::init(&mut encoder_a, "enc_a.l3", DENSE_WIDTH, DENSE_WIDTH, seed),
                Affine::init(&mut encoder_a, "enc_a.l4", DENSE_WIDTH, cfg.d_za, seed),
            ];
            let enc_b = (cfg.cond_dim() > 0)
                .then(|| ImgEncArch::init(&mut encoder_b, "enc_b", cfg.d_zb, seed));
            let dec_a = [
                Affine::init(&mut decoder_a, "dec_a.l1", d_joint, DENSE_WIDTH, seed),
                Affine::init(&mut decoder_a, "dec_a.l2", DENSE_WIDTH, DENSE_WIDTH, seed),
                Affine::init(&mut decoder_a, "dec_a.l3", DENSE_WIDTH, DENSE_WIDTH, seed),
                Affine::init(&mut decoder_a, "dec_a.l4", DENSE_WIDTH, FACTOR_COUNT, seed),
            ];
            let disc_zproj = Affine::init(&mut discriminator, "disc.zproj", d_joint, DISC_ZPROJ_FACTOR, seed);
            let disc_in = 2 * FACTOR_COUNT + DISC_ZPROJ_FACTOR;
            let disc = [
                Affine::init(&mut discriminator, "disc.l1", disc_in, DENSE_WIDTH, seed),
                Affine::init(&mut discriminator, "disc.l2", DENSE_WIDTH, DENSE_WIDTH, seed),
                Affine::init(&mut discriminator, "disc.l3", DENSE_WIDTH, 1, seed),
            ];
            let clf = cfg.has_classifier().then(|| {
                [
                    Affine::init(&mut classifier, "clf.l1", FACTOR_COUNT, CLF_DENSE, seed),
                    Affine::init(&mut classifier, "clf.l2", CLF_DENSE, CLF_DENSE, seed),
                    Affine::init(&mut classifier, "clf.l3", CLF_DENSE, 2, seed),
                ]
            });
            Arch::Factor(FactorArch {
                enc_a,
                enc_b,
                dec_a,
                disc_zproj,
                disc,
                clf,
            })
        }
        TargetModality::ImageTp1 => {
            let enc_a = ImgEncArch::init(&mut encoder_a, "enc_a", cfg.d_za, seed);
            let enc_b = (cfg.cond_dim() > 0).then(|| {
                [
                    Affine::init(&mut encoder_b, "enc_b.l1", FACTOR_COUNT, DENSE_WIDTH, seed),
                    Affine::init(&mut encoder_b, "enc_b.l2", DENSE_WIDTH, DENSE_WIDTH, seed),
                    Affine::init(&mut encoder_b, "enc_b.l3", DENSE_WIDTH, DENSE_WIDTH, seed),
                    Affine::init(&mut encoder_b, "enc_b.l4", DENSE_WIDTH, cfg.d_zb, seed),
                ]
            });
            let dec_fc = Affine::init(&mut decoder_a, "dec.fc", d_joint, IMG_ENC_CH[2] * 16, seed);
            let dec_t1 = ConvT2d::init(&mut decoder_a, "dec.t1", 2 * IMG_ENC_CH[2], DEC_CH[0], 4, 2, 1, seed);
            let dec_t2 = ConvT2d::init(&mut decoder_a, "dec.t2", DEC_CH[0] + IMG_ENC_CH[1], DEC_CH[1], 4, 2, 1, seed);
            let dec_t3 = ConvT2d::init(&mut decoder_a, "dec.t3", DEC_CH[1] + IMG_ENC_CH[0], DEC_CH[2], 4, 2, 1, seed);
            let dec_out = Conv2d::init(&mut decoder_a, "dec.out", DEC_CH[2], 1, 3, 1, 1, seed);
            let disc_zproj = Affine::init(&mut discriminator, "disc.zproj", d_joint, DISC_ZPROJ_IMG_CH, seed);
            let disc_in_ch = 2 + DISC_ZPROJ_IMG_CH;
            let disc_c = [
                Conv2d::init(&mut discriminator, "disc.c1", disc_in_ch, IMG_ENC_CH[0], 4, 2, 1, seed),
                Conv2d::init(&mut discriminator, "disc.c2", IMG_ENC_CH[0], IMG_ENC_CH[1], 4, 2, 1, seed),
                Conv2d::init(&mut discriminator, "disc.c3", IMG_ENC_CH[1], IMG_ENC_CH[2], 4, 2, 1, seed),
            ];
            let disc_fc = Affine::init(&mut discriminator, "disc.fc", IMG_ENC_CH[2] * 16, 1, seed);
            let clf = cfg.has_classifier().then(|| {
                (
                    Conv2d::init(&mut classifier, "clf.c1", 1, CLF_IMG_CH[0], 4, 2, 1, seed),
                    Conv2d::init(&mut classifier, "clf.c2", CLF_IMG_CH[0], CLF_IMG_CH[1], 4, 2, 1, seed),
                    Affine::init(&mut classifier, "clf.fc", CLF_IMG_CH[1] * 64, 2, seed),
                )
            });
            Arch::Image(ImageArch {
                enc_a,
                enc_b,
                dec_fc,
                dec_t1,
                dec_t2,
                dec_t3,
                dec_out,
                disc_zproj,
                disc_c,
                disc_fc,
                clf,
            })
        }
    };

    AdversarialBundle {
        cfg,
        encoder_a,
        encoder_b,
        decoder_a,
        discriminator,
        classifier,
        arch,
    }
}

/// Inputs of one factor-modality adversarial step, already stacked.
#[derive(Debug, Clone)]
pub struct FactorBatch<T: Real> {
    /// (B, F) true values; at missing entries the value is still present in
    /// memory but only reaches the graph through products with the mask.
    pub x: ArrayD<T>,
    /// (B, F) observation mask.
    pub mask: ArrayD<T>,
    /// (B, 1, H, W) conditioning patch; required when the bundle is
    /// conditional.
    pub cond_image: Option<ArrayD<T>>,
    /// (B, d_za) noise for the fake branch.
    pub noise: ArrayD<T>,
    /// (B, F) fake-branch masks drawn from the training missingness.
    pub fake_mask: ArrayD<T>,
    pub labels: Vec<usize>,
}

/// Inputs of one image-modality adversarial step (limiting case: training
/// real samples are complete, masks are all-ones).
#[derive(Debug, Clone)]
pub struct ImageBatch<T: Real> {
    /// (B, 1, H, W) complete current-timepoint patches.
    pub x_tp1: ArrayD<T>,
    /// (B, 1, H, W) background fed to the encoder (center-masked current
    /// patch in training; sharp mode feeds the raw previous patch).
    pub background: ArrayD<T>,
    /// (B, F) completed conditioning factors; required when conditional.
    pub cond_factors: Option<ArrayD<T>>,
    /// (B, d_za) noise for the fake branch.
    pub noise: ArrayD<T>,
    pub labels: Vec<usize>,
}

/// The adversarial objectives of one batch, as tape nodes.
pub struct GanGraph<'t, T: Real> {
    /// Eq-style GAN value: E[log D(real)] + E[log(1 - D(fake))].
    pub gan_value: Var<'t, T>,
    /// Observed-entry mean-squared reconstruction.
    pub reconstruction: Var<'t, T>,
    /// Class regularizer on the generator output (absent when the bundle
    /// has no classifier).
    pub class_term: Option<Var<'t, T>>,
    /// gan_value + lambda_rec * rec + lambda_ce * ce — the generator
    /// descends this, the discriminator ascends gan_value.
    pub g_objective: Var<'t, T>,
    /// Imputed output of the real branch: merge(x, decode(z_o), m) for
    /// factors, the reconstruction decode for images.
    pub x_tilde: Var<'t, T>,
    /// Generated output of the fake branch.
    pub x_gen: Var<'t, T>,
    pub d_real: Var<'t, T>,
    pub d_fake: Var<'t, T>,
}

fn dense_stack<'t, T: Real>(
    layers: &[Affine],
    bp: &BoundParams<'t, T>,
    input: Var<'t, T>,
    final_sigmoid: bool,
) -> Result<Var<'t, T>, DiffError> {
    let mut h = input;
    for (i, layer) in layers.iter().enumerate() {
        h = layer.forward(bp, h)?;
        if i + 1 < layers.len() {
            h = h.relu();
        } else if final_sigmoid {
            h = h.sigmoid();
        }
    }
    Ok(h)
}

impl AdversarialBundle {
    pub(crate) fn factor_arch(&self) -> Result<&FactorArch, GanError> {
        match &self.arch {
            Arch::Factor(a) => Ok(a),
            Arch::Image(_) => Err(GanError::BadBundle("expected a factor-target bundle".into())),
        }
    }

    pub(crate) fn image_arch(&self) -> Result<&ImageArch, GanError> {
        match &self.arch {
            Arch::Image(a) => Ok(a),
            Arch::Factor(_) => Err(GanError::BadBundle("expected an image-target bundle".into())),
        }
    }

    /// Bind every section onto one tape.
    pub fn bind<'t, T: Real>(&self, tape: &'t Tape<T>) -> BoundParams<'t, T>
    where
        T: Real,
    {
        let converted: Vec<ParamSet<T>> = self
            .sections()
            .iter()
            .map(|(_, ps)| ps.convert::<T>())
            .collect();
        let refs: Vec<&ParamSet<T>> = converted.iter().collect();
        BoundParams::bind_all(tape, &refs)
    }
}

/// Factor-modality encoder: z = enc_a([x*m ; m]).
pub fn encode_factors<'t, T: Real>(
    bundle: &AdversarialBundle,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    x_masked_with_mask: &ArrayD<T>,
) -> Result<Var<'t, T>, GanError> {
    let arch = bundle.factor_arch()?;
    let v = tape.leaf(x_masked_with_mask.clone());
    Ok(dense_stack(&arch.enc_a, bp, v, false)?)
}

/// Conditional image encoder of the factor-modality bundle.
fn encode_cond_image<'t, T: Real>(
    arch: &FactorArch,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    img: &ArrayD<T>,
) -> Result<Var<'t, T>, DiffError> {
    let enc = arch.enc_b.as_ref().expect("conditional encoder present");
    let (z, _skips) = enc.forward(bp, tape.leaf(img.clone()))?;
    Ok(z)
}

// Crate-internal forward pieces reused by the imputation paths.

pub(crate) fn encode_cond_image_public<'t, T: Real>(
    arch: &FactorArch,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    img: &ArrayD<T>,
) -> Result<Var<'t, T>, DiffError> {
    encode_cond_image(arch, bp, tape, img)
}

pub(crate) fn decode_factors_public<'t, T: Real>(
    arch: &FactorArch,
    bp: &BoundParams<'t, T>,
    z: Var<'t, T>,
) -> Result<Var<'t, T>, DiffError> {
    dense_stack(&arch.dec_a, bp, z, true)
}

pub(crate) fn encode_image_public<'t, T: Real>(
    arch: &ImageArch,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    img: &ArrayD<T>,
) -> Result<(Var<'t, T>, [Var<'t, T>; 3]), DiffError> {
    arch.enc_a.forward(bp, tape.leaf(img.clone()))
}

pub(crate) fn encode_cond_factors_public<'t, T: Real>(
    arch: &ImageArch,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    factors: &ArrayD<T>,
) -> Result<Var<'t, T>, DiffError> {
    let enc = arch.enc_b.as_ref().expect("conditional encoder present");
    dense_stack(enc, bp, tape.leaf(factors.clone()), false)
}

pub(crate) fn decode_image_public<'t, T: Real>(
    arch: &ImageArch,
    bp: &BoundParams<'t, T>,
    z: Var<'t, T>,
    skips: &[Var<'t, T>; 3],
) -> Result<Var<'t, T>, DiffError> {
    image_decoder(arch, bp, z, skips)
}

fn factor_discriminator<'t, T: Real>(
    arch: &FactorArch,
    bp: &BoundParams<'t, T>,
    x_part: Var<'t, T>,
    mask: Var<'t, T>,
    z: Var<'t, T>,
) -> Result<Var<'t, T>, DiffError> {
    let proj = arch.disc_zproj.forward(bp, z)?;
    let joined = Var::concat(1, &[x_part, mask, proj]);
    let h1 = arch.disc[0].forward(bp, joined)?.leaky_relu(T::from_f64(0.2));
    let h2 = arch.disc[1].forward(bp, h1)?.leaky_relu(T::from_f64(0.2));
    Ok(arch.disc[2].forward(bp, h2)?.sigmoid())
}

/// Build the full factor-modality adversarial graph for one batch.
pub fn build_factor_gan<'t, T: Real>(
    bundle: &AdversarialBundle,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    batch: &FactorBatch<T>,
) -> Result<GanGraph<'t, T>, GanError> {
    let arch = bundle.factor_arch()?;
    let cfg = &bundle.cfg;
    let bsz = batch.x.shape()[0];
    let f = FACTOR_COUNT;
    if batch.mask.shape() != batch.x.shape() || batch.fake_mask.shape() != batch.x.shape() {
        return Err(GanError::BadInput("factor batch shape mismatch".into()));
    }

    // Constants on the tape.
    let x_obs = tape.leaf(&batch.x * &batch.mask); // x with missing entries zeroed
    let mask_c = tape.leaf(batch.mask.clone());
    let fake_mask_c = tape.leaf(batch.fake_mask.clone());

    // Encoder input [x*m ; m] is assembled outside the graph (constants).
    let mut enc_in = ndarray::Array2::<T>::zeros((bsz, 2 * f));
    for i in 0..bsz {
        for j in 0..f {
            enc_in[[i, j]] = batch.x[[i, j]] * batch.mask[[i, j]];
            enc_in[[i, f + j]] = batch.mask[[i, j]];
        }
    }
    let z_a = dense_stack(&arch.enc_a, bp, tape.leaf(enc_in.into_dyn()), false)?;

    let z_b = if cfg.cond_dim() > 0 {
        let img = batch.cond_image.as_ref().ok_or_else(|| {
            GanError::BadInput("conditional bundle needs a conditioning image".into())
        })?;
        Some(encode_cond_image(arch, bp, tape, img)?)
    } else {
        None
    };

    let join = |za: Var<'t, T>| -> Var<'t, T> {
        match z_b {
            Some(zb) => Var::concat(1, &[za, zb]),
            None => za,
        }
    };

    let z_real = join(z_a);
    let noise = tape.leaf(batch.noise.clone());
    let z_fake = join(noise);

    // Decodes: reconstruction from the joint incomplete-data code, sample
    // from the noise code.
    let x_dec = dense_stack(&arch.dec_a, bp, z_real, true)?;
    let x_gen = dense_stack(&arch.dec_a, bp, z_fake, true)?;

    // Discriminator tuples: real (x*m, m, z_real), fake (x_gen*m_hat, m_hat, z_fake).
    let d_real = factor_discriminator(arch, bp, x_obs, mask_c, z_real)?;
    let d_fake = factor_discriminator(arch, bp, x_gen.mul(fake_mask_c), fake_mask_c, z_fake)?;

    let eps = T::from_f64(PROB_EPS);
    let gan_value = d_real
        .log_clamped(eps)
        .mean()
        .add(d_fake.one_minus().log_clamped(eps).mean());

    let reconstruction = masked_mse(x_dec, x_obs, &batch.mask);

    // x_tilde = m*x + (1-m)*x_dec; observed entries are tape constants.
    let x_tilde = x_obs.add(x_dec.mul(mask_c.one_minus()));

    let class_term = match &arch.clf {
        Some(clf) if cfg.lambda_ce != 0.0 => {
            let logits = dense_stack(clf, bp, x_tilde, false)?;
            Some(ce_loss(logits, &batch.labels))
        }
        _ => None,
    };

    let mut g_objective = gan_value;
    if cfg.lambda_rec != 0.0 {
        g_objective = g_objective.add(reconstruction.mul_scalar(T::from_f64(f64::from(cfg.lambda_rec))));
    }
    if let Some(ce) = class_term {
        g_objective = g_objective.add(ce.mul_scalar(T::from_f64(f64::from(cfg.lambda_ce))));
    }
    g_objective = g_objective.add(latent_penalty(z_a, z_b));

    Ok(GanGraph {
        gan_value,
        reconstruction,
        class_term,
        g_objective,
        x_tilde,
        x_gen,
        d_real,
        d_fake,
    })
}

/// mean(z_a^2) (+ mean(z_b^2)) scaled by [`LAMBDA_LATENT`].
fn latent_penalty<'t, T: Real>(z_a: Var<'t, T>, z_b: Option<Var<'t, T>>) -> Var<'t, T> {
    let mut pen = z_a.square().mean();
    if let Some(zb) = z_b {
        pen = pen.add(zb.square().mean());
    }
    pen.mul_scalar(T::from_f64(LAMBDA_LATENT))
}

fn image_decoder<'t, T: Real>(
    arch: &ImageArch,
    bp: &BoundParams<'t, T>,
    z: Var<'t, T>,
    skips: &[Var<'t, T>; 3],
) -> Result<Var<'t, T>, DiffError> {
    let bsz = z.shape()[0];
    let d0 = arch
        .dec_fc
        .forward(bp, z)?
        .relu()
        .reshape(&[bsz, IMG_ENC_CH[2], 4, 4]);
    let u1 = arch
        .dec_t1
        .forward(bp, Var::concat(1, &[d0, skips[2]]))?
        .relu();
    let u2 = arch
        .dec_t2
        .forward(bp, Var::concat(1, &[u1, skips[1]]))?
        .relu();
    let u3 = arch
        .dec_t3
        .forward(bp, Var::concat(1, &[u2, skips[0]]))?
        .relu();
    Ok(arch.dec_out.forward(bp, u3)?.sigmoid())
}

fn image_discriminator<'t, T: Real>(
    arch: &ImageArch,
    bp: &BoundParams<'t, T>,
    x: Var<'t, T>,
    mask_chan: Var<'t, T>,
    z: Var<'t, T>,
) -> Result<Var<'t, T>, DiffError> {
    let bsz = x.shape()[0];
    let proj = arch
        .disc_zproj
        .forward(bp, z)?
        .broadcast_hw(IMG_SIZE, IMG_SIZE);
    let joined = Var::concat(1, &[x, mask_chan, proj]);
    let slope = T::from_f64(0.2);
    let h1 = arch.disc_c[0].forward(bp, joined)?.leaky_relu(slope);
    let h2 = arch.disc_c[1].forward(bp, h1)?.leaky_relu(slope);
    let h3 = arch.disc_c[2].forward(bp, h2)?.leaky_relu(slope);
    Ok(arch
        .disc_fc
        .forward(bp, h3.reshape(&[bsz, IMG_ENC_CH[2] * 16]))?
        .sigmoid())
}

/// Build the image-modality adversarial graph (limiting case). Real-branch
/// masks are all-ones: training uses the complete current-timepoint
/// samples, and the fake branch generates full patches.
pub fn build_image_gan<'t, T: Real>(
    bundle: &AdversarialBundle,
    bp: &BoundParams<'t, T>,
    tape: &'t Tape<T>,
    batch: &ImageBatch<T>,
) -> Result<GanGraph<'t, T>, GanError> {
    let arch = bundle.image_arch()?;
    let cfg = &bundle.cfg;
    let bsz = batch.x_tp1.shape()[0];
    if batch.background.shape() != batch.x_tp1.shape() {
        return Err(GanError::BadInput("image batch shape mismatch".into()));
    }

    let x_real = tape.leaf(batch.x_tp1.clone());
    let ones_chan = tape.leaf(ArrayD::from_elem(
        IxDyn(&[bsz, 1, IMG_SIZE, IMG_SIZE]),
        T::one(),
    ));

    let (z_a, skips) = arch.enc_a.forward(bp, tape.leaf(batch.background.clone()))?;

    let z_b = match &arch.enc_b {
        Some(enc_b) if cfg.cond_dim() > 0 => {
            let fac = batch.cond_factors.as_ref().ok_or_else(|| {
                GanError::BadInput("conditional bundle needs conditioning factors".into())
            })?;
            Some(dense_stack(enc_b, bp, tape.leaf(fac.clone()), false)?)
        }
        _ => None,
    };

    let join = |za: Var<'t, T>| -> Var<'t, T> {
        match z_b {
            Some(zb) => Var::concat(1, &[za, zb]),
            None => za,
        }
    };

    let z_real = join(z_a);
    let z_fake = join(tape.leaf(batch.noise.clone()));

    let x_rec = image_decoder(arch, bp, z_real, &skips)?;
    let x_gen = image_decoder(arch, bp, z_fake, &skips)?;

    let d_real = image_discriminator(arch, bp, x_real, ones_chan, z_real)?;
    let d_fake = image_discriminator(arch, bp, x_gen, ones_chan, z_fake)?;

    let eps = T::from_f64(PROB_EPS);
    let gan_value = d_real
        .log_clamped(eps)
        .mean()
        .add(d_fake.one_minus().log_clamped(eps).mean());

    let ones = ArrayD::from_elem(IxDyn(&[bsz, 1, IMG_SIZE, IMG_SIZE]), T::one());
    let reconstruction = masked_mse(x_rec, x_real, &ones);

    // Limiting case: the class term regularizes the *generated* sample.
    let class_term = match &arch.clf {
        Some((c1, c2, fc)) if cfg.lambda_ce != 0.0 => {
            let h1 = c1.forward(bp, x_gen)?.relu();
            let h2 = c2.forward(bp, h1)?.relu();
            let logits = fc.forward(bp, h2.reshape(&[bsz, CLF_IMG_CH[1] * 64]))?;
            Some(ce_loss(logits, &batch.labels))
        }
        _ => None,
    };

    let mut g_objective = gan_value;
    if cfg.lambda_rec != 0.0 {
        g_objective = g_objective.add(reconstruction.mul_scalar(T::from_f64(f64::from(cfg.lambda_rec))));
    }
    if let Some(ce) = class_term {
        g_objective = g_objective.add(ce.mul_scalar(T::from_f64(f64::from(cfg.lambda_ce))));
    }
    g_objective = g_objective.add(latent_penalty(z_a, z_b));

    Ok(GanGraph {
        gan_value,
        reconstruction,
        class_term,
        g_objective,
        x_tilde: x_rec,
        x_gen,
        d_real,
        d_fake,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversarial::GanMode;

    fn factor_batch(bsz: usize, d_za: usize, with_img: bool) -> FactorBatch<f32> {
        let rng = crate::rng::CounterRng::new(1);
        let mut c = 0u64;
        let mut arr = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    c += 1;
                    rng.uniform_at(c) as f32
                })
                .collect();
            ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
        };
        FactorBatch {
            x: arr(&[bsz, FACTOR_COUNT]),
            mask: arr(&[bsz, FACTOR_COUNT]).mapv(|v| f32::from(v > 0.3)),
            cond_image: with_img.then(|| arr(&[bsz, 1, IMG_SIZE, IMG_SIZE])),
            noise: arr(&[bsz, d_za]).mapv(|v| v - 0.5),
            fake_mask: arr(&[bsz, FACTOR_COUNT]).mapv(|v| f32::from(v > 0.3)),
            labels: (0..bsz).map(|i| i % 2).collect(),
        }
    }

    #[test]
    fn factor_graph_shapes() {
        let bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Cpbigan,
            TargetModality::Factors,
            7,
        ))
        .unwrap();
        let tape = Tape::<f32>::new();
        let bp = bundle.bind(&tape);
        let batch = factor_batch(3, 64, true);
        let g = build_factor_gan(&bundle, &bp, &tape, &batch).unwrap();
        assert_eq!(g.x_tilde.shape(), vec![3, FACTOR_COUNT]);
        assert_eq!(g.x_gen.shape(), vec![3, FACTOR_COUNT]);
        assert_eq!(g.d_real.shape(), vec![3, 1]);
        assert!(g.class_term.is_some());
        assert!(g.gan_value.scalar_value().is_finite());
    }

    #[test]
    fn unconditional_graph_needs_no_image() {
        let bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Pbigan,
            TargetModality::Factors,
            7,
        ))
        .unwrap();
        let tape = Tape::<f32>::new();
        let bp = bundle.bind(&tape);
        let batch = factor_batch(2, 64, false);
        let g = build_factor_gan(&bundle, &bp, &tape, &batch).unwrap();
        assert!(g.class_term.is_none());
        assert!(g.g_objective.scalar_value().is_finite());
    }

    #[test]
    fn discriminator_outputs_probabilities() {
        let bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Cpbigan,
            TargetModality::ImageTp1,
            9,
        ))
        .unwrap();
        let rng = crate::rng::CounterRng::new(3);
        let mut c = 0u64;
        let mut arr = |shape: &[usize]| {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|_| {
                    c += 1;
                    rng.uniform_at(c) as f32
                })
                .collect();
            ArrayD::from_shape_vec(IxDyn(shape), data).unwrap()
        };
        let batch = ImageBatch {
            x_tp1: arr(&[2, 1, IMG_SIZE, IMG_SIZE]),
            background: arr(&[2, 1, IMG_SIZE, IMG_SIZE]),
            cond_factors: Some(arr(&[2, FACTOR_COUNT])),
            noise: arr(&[2, 64]).mapv(|v| (v - 0.5) * 2.0),
            labels: vec![0, 1],
        };
        let tape = Tape::<f32>::new();
        let bp = bundle.bind(&tape);
        let g = build_image_gan(&bundle, &bp, &tape, &batch).unwrap();
        for d in [g.d_real, g.d_fake] {
            assert!(d.value().iter().all(|&p| p > 0.0 && p < 1.0));
        }
        assert_eq!(g.x_gen.shape(), vec![2, 1, IMG_SIZE, IMG_SIZE]);
        assert!(g.x_gen.value().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn encoder_ignores_values_at_missing_entries() {
        // two x differing only where m=0 produce identical codes
        let bundle = AdversarialBundle::init(BundleConfig::new(
            GanMode::Pbigan,
            TargetModality::Factors,
            3,
        ))
        .unwrap();
        let mut batch = factor_batch(1, 64, false);
        batch.mask.fill(1.0);
        batch.mask[[0, 5]] = 0.0;
        let encode = |b: &FactorBatch<f32>| {
            let tape = Tape::<f32>::new();
            let bp = bundle.bind(&tape);
            let g = build_factor_gan(&bundle, &bp, &tape, b).unwrap();
            let _ = g;
            // re-derive the code deterministically through the public helper
            let f = FACTOR_COUNT;
            let mut enc_in = ndarray::Array2::<f32>::zeros((1, 2 * f));
            for j in 0..f {
                enc_in[[0, j]] = b.x[[0, j]] * b.mask[[0, j]];
                enc_in[[0, f + j]] = b.mask[[0, j]];
            }
            let tape2 = Tape::<f32>::new();
            let bp2 = bundle.bind(&tape2);
            encode_factors(&bundle, &bp2, &tape2, &enc_in.into_dyn())
                .unwrap()
                .value()
        };
        let z1 = encode(&batch);
        let mut batch2 = batch.clone();
        batch2.x[[0, 5]] = 0.987; // only a missing entry changes
        let z2 = encode(&batch2);
        assert_eq!(z1, z2);
        assert_eq!(z1.len(), 64);
    }

    #[test]
    fn sharp_mode_rejected_for_factor_target() {
        let err = AdversarialBundle::init(BundleConfig::new(
            GanMode::CpbiganSharp,
            TargetModality::Factors,
            1,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("image-modality"));
    }
}
