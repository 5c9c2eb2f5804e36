//! Image-quality metrics: PSNR, SSIM, the content score LPIPS-c and a
//! Fréchet distance between feature sets, the last two over a pluggable
//! feature embedder.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use stainkd_nn::layers::Conv2d;
use stainkd_nn::{Init, ParamSet, Precision, Tape};

use crate::error::{Result, StainError};
use crate::image::{to_grayscale, ColorSpace, RasterImage};

/// Reported for identical images instead of infinity.
pub const PSNR_CAP: f64 = 100.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &RasterImage, b: &RasterImage) -> Result<()> {
    if !a.same_size(b) || a.channels() != b.channels() {
        return Err(StainError::Shape(format!(
            "{}x{}x{} vs {}x{}x{}",
            a.height(),
            a.width(),
            a.channels(),
            b.height(),
            b.width(),
            b.channels()
        )));
    }
    Ok(())
}

/// `10·log10(peak² / MSE)` in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &RasterImage, b: &RasterImage, peak: f64) -> Result<f64> {
    check_same(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    Ok(psnr_from_mse(mse, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

/// Mean SSIM over every full 11×11 window position, averaged over channels.
/// The dynamic range is the width of the images' value range.
pub fn ssim(a: &RasterImage, b: &RasterImage) -> Result<f64> {
    check_same(a, b)?;
    let (h, w, c) = (a.height(), a.width(), a.channels());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(StainError::InvalidInput(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let l = a.range().width();
    if !l.is_finite() {
        return Err(StainError::InvalidInput("SSIM needs a bounded value range".into()));
    }
    let (c1, c2) = ((SSIM_K1 * l).powi(2), (SSIM_K2 * l).powi(2));
    let g = gaussian_window();
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let at = |img: &RasterImage, i: usize, j: usize| img.data()[(i * w + j) * c + ch];
        for i in 0..oh {
            for j in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (di, gi) in g.iter().enumerate() {
                    for (dj, gj) in g.iter().enumerate() {
                        let wt = gi * gj;
                        let (x, y) = (at(a, i + di, j + dj), at(b, i + di, j + dj));
                        ma += wt * x;
                        mb += wt * y;
                        saa += wt * x * x;
                        sbb += wt * y * y;
                        sab += wt * (x * y);
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * (ma * mb) + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (c * oh * ow) as f64)
}

/// One layer of features, planar `C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// A fixed, deterministic image-to-features map.
pub trait FeatureEmbedder {
    /// Name and seed, recorded next to every score.
    fn tag(&self) -> String;
    fn layers(&self, img: &RasterImage) -> Result<Vec<FeatureMap>>;

    /// Spatial means of every layer, concatenated.
    fn embed(&self, img: &RasterImage) -> Result<Vec<f64>> {
        Ok(self
            .layers(img)?
            .iter()
            .flat_map(|m| {
                let plane = m.height * m.width;
                (0..m.channels).map(move |c| m.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64)
            })
            .collect())
    }
}

/// Three random strided 3×3 convolutions with leaky ReLUs. Grey inputs are
/// replicated to three channels.
#[derive(Debug)]
pub struct RandomConvEmbedder {
    seed: u64,
    params: ParamSet,
    convs: Vec<Conv2d>,
}

impl RandomConvEmbedder {
    pub const WIDTHS: [usize; 3] = [8, 16, 32];

    pub fn new(seed: u64) -> Self {
        let mut params = ParamSet::new();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (k, &cout) in Self::WIDTHS.iter().enumerate() {
            let std = (2.0 / (cin * 9) as f64).sqrt();
            let mut init = Init::normal(seed.wrapping_add(k as u64), std);
            convs.push(Conv2d::new(&mut params, &mut init, &format!("embed{k}"), cin, cout, 3, 2, 1));
            cin = cout;
        }
        RandomConvEmbedder { seed, params, convs }
    }

    pub fn dim(&self) -> usize {
        Self::WIDTHS.iter().sum()
    }
}

impl FeatureEmbedder for RandomConvEmbedder {
    fn tag(&self) -> String {
        format!("random-conv-{}-{}-{}/seed={}", Self::WIDTHS[0], Self::WIDTHS[1], Self::WIDTHS[2], self.seed)
    }

    fn layers(&self, img: &RasterImage) -> Result<Vec<FeatureMap>> {
        let rgb = match img.space() {
            ColorSpace::Gray => img.gray_to_rgb()?,
            ColorSpace::Rgb => img.clone(),
            other => return Err(StainError::InvalidInput(format!("cannot embed a {other:?} image"))),
        };
        let r = rgb.range();
        let input = rgb.to_tensor().map(|v| 2.0 * (v - r.lo) / r.width() - 1.0);
        let tape = Tape::inference(Precision::Double);
        let p = tape.bind(&self.params, false);
        let mut x = tape.constant(input);
        let mut out = Vec::new();
        for conv in &self.convs {
            x = conv.forward(&p, x).leaky_relu(0.2);
            let v = x.value();
            let (_, c, h, w) = v.dims4()?;
            out.push(FeatureMap { channels: c, height: h, width: w, data: v.data().to_vec() });
        }
        Ok(out)
    }
}

/// LPIPS-style distance between two images: per layer, features are
/// unit-normalized across channels at each position, squared differences
/// are summed over channels and averaged over positions, and the layers are
/// summed with unit weights.
pub fn feature_distance(a: &RasterImage, b: &RasterImage, embedder: &dyn FeatureEmbedder) -> Result<f64> {
    check_same(a, b)?;
    let (la, lb) = (embedder.layers(a)?, embedder.layers(b)?);
    let mut total = 0.0;
    for (fa, fb) in la.iter().zip(&lb) {
        let plane = fa.height * fa.width;
        let mut layer = 0.0;
        for k in 0..plane {
            let norm = |m: &FeatureMap| (0..m.channels).map(|c| m.data[c * plane + k].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(fa), norm(fb));
            for c in 0..fa.channels {
                let d = fa.data[c * plane + k] / na - fb.data[c * plane + k] / nb;
                layer += d * d;
            }
        }
        total += layer / plane as f64;
    }
    Ok(total)
}

/// Content preservation: the distance between the grey version of `y_hat`
/// and the enhanced image `z`. Lower is better.
pub fn lpips_c(y_hat: &RasterImage, z: &RasterImage, embedder: &dyn FeatureEmbedder) -> Result<f64> {
    let gray = match y_hat.space() {
        ColorSpace::Gray => y_hat.clone(),
        _ => to_grayscale(y_hat)?,
    };
    feature_distance(&gray, z, embedder)
}

/// Mean and covariance (divisor `n − 1`) of a feature set.
pub fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = features.len();
    if n == 0 {
        return Err(StainError::Empty { what: "feature set" });
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(StainError::Shape("feature vectors differ in length".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centred = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = if n > 1 { centred.transpose() * &centred / (n - 1) as f64 } else { DMatrix::zeros(d, d) };
    Ok((mean, cov))
}

/// `‖μ_a − μ_b‖² + tr(Σ_a + Σ_b − 2(Σ_a Σ_b)^{1/2})`. The trace of the root
/// is taken from the eigenvalues of `Σ_a^{1/2} Σ_b Σ_a^{1/2}`, which is
/// symmetric and shares its spectrum with `Σ_a Σ_b`.
pub fn frechet_gaussian(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    // Identical moments give exactly zero; the eigen route would leave rounding residue.
    if mu_a == mu_b && cov_a == cov_b {
        return 0.0;
    }
    let sqrt_a = psd_sqrt(cov_a);
    let inner = &sqrt_a * cov_b * &sqrt_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let diff = mu_a - mu_b;
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let roots = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

/// Blend weight toward the scaled identity for sets smaller than a quarter
/// of the feature dimension.
pub const SHRINKAGE: f64 = 0.1;

fn shrink(cov: DMatrix<f64>, n: usize) -> DMatrix<f64> {
    let d = cov.nrows();
    if 4 * n >= d {
        return cov;
    }
    let target = cov.trace() / d as f64;
    cov * (1.0 - SHRINKAGE) + DMatrix::identity(d, d) * (SHRINKAGE * target)
}

/// Fréchet distance between two feature sets.
pub fn frechet_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(StainError::Shape("feature sets differ in dimension".into()));
    }
    Ok(frechet_gaussian(&ma, &shrink(ca, a.len()), &mb, &shrink(cb, b.len())))
}

pub fn frechet_distance(set_a: &[RasterImage], set_b: &[RasterImage], embedder: &dyn FeatureEmbedder) -> Result<f64> {
    if set_a.is_empty() || set_b.is_empty() {
        return Err(StainError::Empty { what: "image set" });
    }
    let fa = set_a.iter().map(|i| embedder.embed(i)).collect::<Result<Vec<_>>>()?;
    let fb = set_b.iter().map(|i| embedder.embed(i)).collect::<Result<Vec<_>>>()?;
    frechet_features(&fa, &fb)
}

/// Per-image scores for the evaluation CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageScores {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips_c: f64,
}

/// `image_id,psnr,ssim,lpips_c` rows, then a footer with the set-level
/// Fréchet distance and the embedder tag.
pub fn write_eval_csv(out: &mut impl Write, rows: &[ImageScores], frechet: f64, tag: &str) -> Result<()> {
    writeln!(out, "image_id,psnr,ssim,lpips_c")?;
    for r in rows {
        writeln!(out, "{},{:.6},{:.6},{:.6}", r.image_id, r.psnr, r.ssim, r.lpips_c)?;
    }
    writeln!(out, "frechet,{frechet:.6},embedder,{tag}")?;
    Ok(())
}
