//! The distilled student: generator `G`, backward generator `F`, patch
//! discriminator `D`, and the unpaired objective
//! `L_U = L_adv + λ1·L_kd + λ2·L_cyc`.

use serde::{Deserialize, Serialize};
use stainkd_nn::{Precision, Tape, Tensor, Var};

use crate::enhance::LightEnhancer;
use crate::error::{Result, StainError};
use crate::image::{from_network, to_network, ColorSpace, RasterImage};
use crate::nets::{
    DiscriminatorSpec, GeneratorSpec, Network, PatchDiscriminator, ResnetGenerator,
};

pub use crate::train::train_step_unpaired;

/// Loss weights `λ1..λ4`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kd: f64,
    pub cyc: f64,
    pub con: f64,
    pub smoo: f64,
}

impl LossWeights {
    pub const UNPAIRED: LossWeights = LossWeights { kd: 5.0, cyc: 80.0, con: 0.0, smoo: 0.0 };
    pub const PAIRED: LossWeights = LossWeights { kd: 2.0, cyc: 10.0, con: 20.0, smoo: 10.0 };

    pub fn validate(&self) -> Result<()> {
        let all = [self.kd, self.cyc, self.con, self.smoo];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(StainError::InvalidInput(format!("loss weights must be non-negative, got {self:?}")));
        }
        Ok(())
    }
}

/// Named scalar losses of one training step. Terms that a setting does not
/// use stay at zero.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_adv: f64,
    pub l_d: f64,
    pub l_kd: f64,
    pub l_cyc: f64,
    pub l_con: f64,
    pub l_smoo: f64,
    /// Adversarial terms of the optional domain-X discriminator.
    pub l_adv_x: f64,
    pub l_d_x: f64,
    pub l_u: f64,
    pub l_p: f64,
}

impl LossReport {
    /// `λ1·L_kd` as it enters the total.
    pub fn kd_contribution(&self, w: &LossWeights) -> f64 {
        w.kd * self.l_kd
    }

    pub fn is_finite(&self) -> bool {
        [self.l_adv, self.l_d, self.l_kd, self.l_cyc, self.l_con, self.l_smoo, self.l_adv_x, self.l_d_x, self.l_u, self.l_p]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Scalar components of `L_U`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct UnpairedTerms {
    pub adv: f64,
    pub kd: f64,
    pub cyc: f64,
}

pub fn unpaired_total(adv: f64, kd: f64, cyc: f64, w: &LossWeights) -> f64 {
    adv + w.kd * kd + w.cyc * cyc
}

/// `L_U = L_adv + λ1·L_kd + λ2·L_cyc`, with every term reported.
pub fn loss_unpaired(terms: UnpairedTerms, weights: &LossWeights) -> LossReport {
    let l_u = unpaired_total(terms.adv, terms.kd, terms.cyc, weights);
    LossReport { l_adv: terms.adv, l_kd: terms.kd, l_cyc: terms.cyc, l_u, l_p: l_u, ..Default::default() }
}

/// The same weighted sum on the tape, summed in the same order as
/// [`unpaired_total`] so the two agree bit for bit.
pub fn unpaired_objective<'t>(adv: Var<'t>, kd: Var<'t>, cyc: Var<'t>, w: &LossWeights) -> Var<'t> {
    adv.add(kd.mul_scalar(w.kd)).add(cyc.mul_scalar(w.cyc))
}

/// `[N, 4, H, W]` generator input: RGB channels of `x` then `z`.
pub fn concat_input_tensors(x: &Tensor, z: &Tensor) -> Result<Tensor> {
    let (nx, cx, hx, wx) = x.dims4()?;
    let (nz, cz, hz, wz) = z.dims4()?;
    if (nx, hx, wx) != (nz, hz, wz) || cx != 3 || cz != 1 {
        return Err(StainError::Shape(format!("cannot stack x {:?} with z {:?}", x.shape(), z.shape())));
    }
    Ok(Tensor::cat_channels(&[x, z])?)
}

/// Single-image form: both images go from storage to network range first.
pub fn concat_input(x: &RasterImage, z: &RasterImage) -> Result<Tensor> {
    x.expect_space(ColorSpace::Rgb)?;
    z.expect_space(ColorSpace::Gray)?;
    if !x.same_size(z) {
        return Err(StainError::Shape(format!(
            "x is {}x{} but z is {}x{}",
            x.height(),
            x.width(),
            z.height(),
            z.width()
        )));
    }
    concat_input_tensors(&to_network(&[x])?, &to_network(&[z])?)
}

/// `L_kd = ‖y_t − ŷ‖₁`, averaged over elements.
pub fn loss_kd<'t>(y_hat: Var<'t>, y_t: Var<'t>) -> Var<'t> {
    y_hat.l1_to(y_t)
}

/// `L_cyc = ‖F(ŷ) − x‖₁`, averaged over elements.
pub fn loss_cyc<'t>(f: impl FnOnce(Var<'t>) -> Var<'t>, y_hat: Var<'t>, x: Var<'t>) -> Var<'t> {
    f(y_hat).l1_to(x)
}

/// `L_adv = (D(ŷ) − 1)²`, averaged over the batch.
pub fn lsgan_generator(d_fake: Var<'_>) -> Var<'_> {
    d_fake.add_scalar(-1.0).square().mean()
}

/// `L_D = (D(y) − 1)² + D(ŷ)²`, averaged over the batch.
pub fn lsgan_discriminator<'t>(d_real: Var<'t>, d_fake: Var<'t>) -> Var<'t> {
    d_real.add_scalar(-1.0).square().mean().add(d_fake.square().mean())
}

/// Scalar `(L_adv, L_D)` for given scores.
pub fn loss_lsgan(d_fake: f64, d_real: f64) -> (f64, f64) {
    let adv = (d_fake - 1.0) * (d_fake - 1.0);
    (adv, (d_real - 1.0) * (d_real - 1.0) + d_fake * d_fake)
}

/// Architecture choices for the student networks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudentSpec {
    pub generator_width: usize,
    pub discriminator_width: usize,
    /// Adds a discriminator on domain X acting on `F(ŷ)`.
    pub symmetric: bool,
}

/// `G`, `F`, `D` and the optional `D_X`.
#[derive(Clone, Debug)]
pub struct StudentNets {
    pub g: ResnetGenerator,
    pub f: ResnetGenerator,
    pub d: PatchDiscriminator,
    pub d_x: Option<PatchDiscriminator>,
}

impl StudentNets {
    pub fn new(spec: &StudentSpec, seed: u64) -> Result<Self> {
        Ok(StudentNets {
            g: ResnetGenerator::new(GeneratorSpec::student(spec.generator_width), seed)?,
            f: ResnetGenerator::new(GeneratorSpec::backward(spec.generator_width), seed.wrapping_add(1))?,
            d: PatchDiscriminator::new(DiscriminatorSpec::patch(3, spec.discriminator_width), seed.wrapping_add(2))?,
            d_x: if spec.symmetric {
                Some(PatchDiscriminator::new(DiscriminatorSpec::patch(3, spec.discriminator_width), seed.wrapping_add(3))?)
            } else {
                None
            },
        })
    }
}

/// Runs `G` on a stacked `[N, 4, H, W]` input on an inference tape.
pub fn generate(g: &ResnetGenerator, input: &Tensor) -> Tensor {
    let tape = Tape::inference(Precision::Single);
    let x = tape.constant(input.clone());
    let out = g.apply(&tape, x, false).value();
    (*out).clone()
}

/// `ŷ = G(x ⓒ H(x))`, returned in `[0, 1]`. Only `G` and the CDF tables
/// are consulted. Sizes that are not multiples of 4 are edge-padded for the
/// network and cropped back.
pub fn infer(x: &RasterImage, enhancer: &LightEnhancer, g: &ResnetGenerator) -> Result<RasterImage> {
    x.expect_space(ColorSpace::Rgb)?;
    let z = enhancer.apply(x)?;
    let (h, w) = (x.height(), x.width());
    let (ph, pw) = (h.div_ceil(4) * 4, w.div_ceil(4) * 4);
    let input = concat_input(&x.edge_pad(ph, pw)?, &z.edge_pad(ph, pw)?)?;
    let out = from_network(&generate(g, &input), 0, ColorSpace::Rgb)?;
    out.crop(0, 0, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::enhance::{CdfMode, IlluminanceCdf};

    #[test]
    fn presets_are_pinned() {
        assert_eq!(LossWeights::UNPAIRED, LossWeights { kd: 5.0, cyc: 80.0, con: 0.0, smoo: 0.0 });
        assert_eq!(LossWeights::PAIRED, LossWeights { kd: 2.0, cyc: 10.0, con: 20.0, smoo: 10.0 });
    }

    #[test]
    fn unpaired_total_examples() {
        let unit = UnpairedTerms { adv: 1.0, kd: 1.0, cyc: 1.0 };
        assert_eq!(loss_unpaired(unit, &LossWeights::UNPAIRED).l_u, 86.0);
        assert_eq!(loss_unpaired(UnpairedTerms::default(), &LossWeights::UNPAIRED).l_u, 0.0);
        let zero = LossWeights { kd: 0.0, cyc: 0.0, con: 0.0, smoo: 0.0 };
        let terms = UnpairedTerms { adv: 0.37, kd: 2.0, cyc: 3.0 };
        assert_eq!(loss_unpaired(terms, &zero).l_u, 0.37);
    }

    #[test]
    fn kd_contribution_scales_linearly() {
        let terms = UnpairedTerms { adv: 0.2, kd: 0.7, cyc: 0.1 };
        let w = LossWeights::UNPAIRED;
        let base = loss_unpaired(terms, &w).kd_contribution(&w);
        for alpha in [0.0, 0.5, 3.0] {
            let scaled = LossWeights { kd: w.kd * alpha, ..w };
            assert_eq!(loss_unpaired(terms, &scaled).kd_contribution(&scaled), base * alpha);
        }
    }

    #[test]
    fn lsgan_examples() {
        assert_eq!(loss_lsgan(1.0, 0.3).0, 0.0);
        assert_eq!(loss_lsgan(0.0, 1.0).1, 0.0);
        assert_eq!(loss_lsgan(0.5, 0.5), (0.25, 0.5));
    }

    #[test]
    fn tape_lsgan_matches_scalar_form() {
        let tape = Tape::new(Precision::Double);
        let fake = tape.constant(Tensor::full(&[2], 0.5));
        let real = tape.constant(Tensor::full(&[2], 0.5));
        assert_eq!(lsgan_generator(fake).value().item(), 0.25);
        assert_eq!(lsgan_discriminator(real, fake).value().item(), 0.5);
    }

    #[test]
    fn concat_input_layout() {
        let x = RasterImage::rgb(2, 2, vec![0.0; 12]).unwrap();
        let z = RasterImage::gray(2, 2, vec![1.0; 4]).unwrap();
        let t = concat_input(&x, &z).unwrap();
        assert_eq!(t.shape(), &[1, 4, 2, 2]);
        assert!(t.data()[..12].iter().all(|&v| v == -1.0));
        assert!(t.data()[12..].iter().all(|&v| v == 1.0));
        let small = RasterImage::gray(1, 2, vec![1.0; 2]).unwrap();
        assert!(matches!(concat_input(&x, &small), Err(StainError::Shape(_))));
    }

    #[test]
    fn loss_kd_examples() {
        let tape = Tape::new(Precision::Double);
        let a = Tensor::from_vec(&[1, 3, 2, 2], (0..12).map(|i| i as f64 * 0.1 - 0.5).collect()).unwrap();
        let y = tape.constant(a.clone());
        assert_eq!(loss_kd(y, y).value().item(), 0.0);
        let shifted = tape.constant(a.map(|v| v + 0.5));
        assert!((loss_kd(shifted, y).value().item() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn loss_cyc_with_identity_and_offset() {
        let tape = Tape::new(Precision::Double);
        let x = tape.constant(Tensor::full(&[1, 3, 2, 2], -0.25));
        assert_eq!(loss_cyc(|v| v, x, x).value().item(), 0.0);
        assert_eq!(loss_cyc(|v| v.add_scalar(1.0), x, x).value().item(), 1.0);
    }

    #[test]
    fn infer_touches_only_the_generator() {
        let nets = StudentNets::new(&StudentSpec { generator_width: 2, discriminator_width: 2, symmetric: true }, 4).unwrap();
        let c = IlluminanceCdf::darkfield(6.0).unwrap();
        let enhancer = LightEnhancer::new(c.clone(), c, CdfMode::Corpus);
        let x = RasterImage::rgb(6, 10, (0..180).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
        let before = (nets.g.params().reads(), nets.f.params().reads(), nets.d.params().reads());
        let y = infer(&x, &enhancer, &nets.g).unwrap();
        assert_eq!((y.height(), y.width(), y.channels()), (6, 10, 3));
        assert!(nets.g.params().reads() > before.0);
        assert_eq!(nets.f.params().reads(), before.1);
        assert_eq!(nets.d.params().reads(), before.2);
        assert_eq!(nets.d_x.as_ref().unwrap().params().reads(), 0);
        assert_eq!(infer(&x, &enhancer, &nets.g).unwrap(), y);
    }
}
