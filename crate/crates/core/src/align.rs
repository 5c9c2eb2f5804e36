//! Learning to align: a registration network predicts a displacement field
//! that warps the prediction `ŷ` onto the misaligned reference `y`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use stainkd_nn::{Precision, Tape, Tensor, Var};

use crate::error::{file_err, Result, StainError};
use crate::image::{ColorSpace, RasterImage, ValueRange};
use crate::nets::{Network, UNet, UNetHead, UNetSpec};
use crate::student::{unpaired_total, LossReport, LossWeights};

pub use crate::train::train_step_paired;

const WARP_MAGIC: &[u8; 4] = b"SKDW";

/// Per-pixel displacement in pixels. Plane 0 is horizontal, plane 1 vertical.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    /// Planar `2 × H × W`.
    data: Vec<f64>,
}

impl DeformationField {
    pub fn zeros(height: usize, width: usize) -> Self {
        DeformationField { height, width, data: vec![0.0; 2 * height * width] }
    }

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * height * width {
            return Err(StainError::Shape(format!(
                "{height}x{width} field needs {} values, got {}",
                2 * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(StainError::InvalidInput("deformation field must be finite".into()));
        }
        Ok(DeformationField { height, width, data })
    }

    /// Constant displacement `(dx, dy)` everywhere.
    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        let plane = height * width;
        let mut data = vec![dx; 2 * plane];
        data[plane..].fill(dy);
        DeformationField { height, width, data }
    }

    /// Item `index` of a `[N, 2, H, W]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 2 || index >= n {
            return Err(StainError::Shape(format!("no field {index} in tensor {:?}", t.shape())));
        }
        let plane = 2 * h * w;
        Self::new(h, w, t.data()[index * plane..(index + 1) * plane].to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 2, self.height, self.width], self.data.clone()).expect("field shape")
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `(dx, dy)` at a pixel.
    pub fn at(&self, row: usize, col: usize) -> (f64, f64) {
        let i = row * self.width + col;
        (self.data[i], self.data[self.height * self.width + i])
    }

    pub fn max_magnitude(&self) -> f64 {
        let plane = self.height * self.width;
        (0..plane).map(|i| self.data[i].hypot(self.data[plane + i])).fold(0.0, f64::max)
    }

    pub fn scaled(&self, k: f64) -> Self {
        DeformationField { data: self.data.iter().map(|v| v * k).collect(), ..self.clone() }
    }

    /// Crop of the field; displacements are unchanged.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<Self> {
        if row + height > self.height || col + width > self.width {
            return Err(StainError::Shape("field crop out of bounds".into()));
        }
        let mut data = Vec::with_capacity(2 * height * width);
        for c in 0..2 {
            for r in row..row + height {
                let start = c * self.height * self.width + r * self.width + col;
                data.extend_from_slice(&self.data[start..start + width]);
            }
        }
        Ok(DeformationField { height, width, data })
    }

    /// Values rounded to `f32`, the precision of the on-disk layout.
    pub fn quantized(&self) -> Self {
        DeformationField { data: self.data.iter().map(|&v| v as f32 as f64).collect(), ..self.clone() }
    }

    /// The field `ψ` with `ψ(p) = −φ(p + ψ(p))`, so that warping by `φ` and
    /// then by `ψ` returns every interior point to itself. Solved by
    /// fixed-point iteration with bilinear lookups into `φ`.
    pub fn inverse(&self, iterations: usize) -> Self {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut inv = DeformationField::zeros(h, w);
        for _ in 0..iterations {
            let mut next = vec![0.0; 2 * plane];
            for i in 0..h {
                for j in 0..w {
                    let k = i * w + j;
                    let sx = j as f64 + inv.data[k];
                    let sy = i as f64 + inv.data[plane + k];
                    next[k] = -bilinear(&self.data[..plane], h, w, sx, sy);
                    next[plane + k] = -bilinear(&self.data[plane..], h, w, sx, sy);
                }
            }
            inv.data = next;
        }
        inv
    }

    /// Binary layout: `SKDW`, `u32` height, `u32` width, then the two planes
    /// as little-endian `f32`.
    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(WARP_MAGIC)?;
        out.write_all(&(self.height as u32).to_le_bytes())?;
        out.write_all(&(self.width as u32).to_le_bytes())?;
        let mut bytes = Vec::with_capacity(4 * self.data.len());
        for &v in &self.data {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(input: &mut impl Read) -> Result<Self> {
        let bad = |detail: &str| StainError::Format { what: "warp file", detail: detail.into() };
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != WARP_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let height = u32::from_le_bytes(word) as usize;
        input.read_exact(&mut word).map_err(|_| bad("truncated header"))?;
        let width = u32::from_le_bytes(word) as usize;
        let mut bytes = vec![0u8; 8 * height * width];
        input.read_exact(&mut bytes).map_err(|_| bad("truncated data"))?;
        let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        Self::new(height, width, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf).map_err(file_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(file_err(path))?;
        Self::read_from(&mut bytes.as_slice())
    }
}

/// Bilinear sample of one `h × w` plane at `(sx, sy)`, clamped to the border.
fn bilinear(plane: &[f64], h: usize, w: usize, sx: f64, sy: f64) -> f64 {
    let s = Sample::new(sx, sy, h, w);
    s.value(plane, w)
}

/// Bilinear sample position with clamp-to-edge handling.
#[derive(Clone, Copy)]
struct Sample {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    fx: f64,
    fy: f64,
    /// Whether the unclamped coordinate was inside, i.e. whether moving it
    /// changes the result.
    inside_x: bool,
    inside_y: bool,
}

impl Sample {
    fn new(sx: f64, sy: f64, h: usize, w: usize) -> Self {
        let (x0, x1, fx, inside_x) = axis(sx, w);
        let (y0, y1, fy, inside_y) = axis(sy, h);
        Sample { x0, y0, x1, y1, fx, fy, inside_x, inside_y }
    }

    fn value(&self, plane: &[f64], w: usize) -> f64 {
        let (v00, v01) = (plane[self.y0 * w + self.x0], plane[self.y0 * w + self.x1]);
        let (v10, v11) = (plane[self.y1 * w + self.x0], plane[self.y1 * w + self.x1]);
        let top = v00 * (1.0 - self.fx) + v01 * self.fx;
        let bottom = v10 * (1.0 - self.fx) + v11 * self.fx;
        top * (1.0 - self.fy) + bottom * self.fy
    }

    /// Partial derivatives of the sampled value w.r.t. `sx` and `sy`.
    fn slopes(&self, plane: &[f64], w: usize) -> (f64, f64) {
        let (v00, v01) = (plane[self.y0 * w + self.x0], plane[self.y0 * w + self.x1]);
        let (v10, v11) = (plane[self.y1 * w + self.x0], plane[self.y1 * w + self.x1]);
        let dx = if self.inside_x { (v01 - v00) * (1.0 - self.fy) + (v11 - v10) * self.fy } else { 0.0 };
        let dy = if self.inside_y { (v10 - v00) * (1.0 - self.fx) + (v11 - v01) * self.fx } else { 0.0 };
        (dx, dy)
    }
}

/// Lower and upper taps and the fraction along one axis of length `n`.
fn axis(s: f64, n: usize) -> (usize, usize, f64, bool) {
    if n == 1 {
        return (0, 0, 0.0, false);
    }
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&s);
    let c = s.clamp(0.0, max);
    let i0 = (c.floor() as usize).min(n - 2);
    (i0, i0 + 1, c - i0 as f64, inside)
}

/// `ŷ′ = ŷ ∘ φ`: output pixel `(i, j)` is `img` sampled bilinearly at
/// `(j + φ₀[i, j], i + φ₁[i, j])`, clamped to the border. Differentiable in
/// both the image and the field.
pub fn resample<'t>(img: Var<'t>, phi: Var<'t>) -> Var<'t> {
    let x = img.value();
    let f = phi.value();
    let (n, c, h, w) = x.dims4().expect("resample image");
    let (fnn, fc, fh, fw) = f.dims4().expect("resample field");
    assert!(fnn == n && fc == 2 && fh == h && fw == w, "field {:?} does not fit image {:?}", f.shape(), x.shape());
    let plane = h * w;
    let mut samples = Vec::with_capacity(n * plane);
    for b in 0..n {
        let fb = &f.data()[b * 2 * plane..(b + 1) * 2 * plane];
        for i in 0..h {
            for j in 0..w {
                let k = i * w + j;
                samples.push(Sample::new(j as f64 + fb[k], i as f64 + fb[plane + k], h, w));
            }
        }
    }
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            let dst = &mut out[(b * c + ch) * plane..(b * c + ch + 1) * plane];
            for (k, d) in dst.iter_mut().enumerate() {
                *d = samples[b * plane + k].value(src, w);
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), out).expect("resample output");
    img.tape().custom(&[img, phi], out, move |g, needs| {
        let dimg = needs[0].then(|| {
            let mut d = vec![0.0; x.len()];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let dst = &mut d[base..base + plane];
                    for k in 0..plane {
                        let s = samples[b * plane + k];
                        let gk = g.data()[base + k];
                        dst[s.y0 * w + s.x0] += gk * (1.0 - s.fx) * (1.0 - s.fy);
                        dst[s.y0 * w + s.x1] += gk * s.fx * (1.0 - s.fy);
                        dst[s.y1 * w + s.x0] += gk * (1.0 - s.fx) * s.fy;
                        dst[s.y1 * w + s.x1] += gk * s.fx * s.fy;
                    }
                }
            }
            Tensor::from_vec(x.shape(), d).expect("image grad")
        });
        let dphi = needs[1].then(|| {
            let mut d = vec![0.0; n * 2 * plane];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * plane;
                    let src = &x.data()[base..base + plane];
                    for k in 0..plane {
                        let (sx, sy) = samples[b * plane + k].slopes(src, w);
                        let gk = g.data()[base + k];
                        d[b * 2 * plane + k] += gk * sx;
                        d[b * 2 * plane + plane + k] += gk * sy;
                    }
                }
            }
            Tensor::from_vec(&[n, 2, h, w], d).expect("field grad")
        });
        vec![dimg, dphi]
    })
}

/// Image-level resampling, used for warping data and for inspection.
pub fn resample_image(img: &RasterImage, field: &DeformationField) -> Result<RasterImage> {
    if img.height() != field.height() || img.width() != field.width() {
        return Err(StainError::Shape(format!(
            "field {}x{} does not fit image {}x{}",
            field.height(),
            field.width(),
            img.height(),
            img.width()
        )));
    }
    let tape = Tape::inference(Precision::Double);
    let out = resample(tape.constant(img.to_tensor()), tape.constant(field.to_tensor())).value();
    let range = img.range();
    // Bilinear weights are convex, so the range is kept up to rounding.
    let clamped = out.map(|v| v.clamp(range.lo, range.hi));
    RasterImage::from_tensor(&clamped, 0, img.space(), range)
}

/// `L_con = ‖ŷ′ − y‖₁`, averaged over elements.
pub fn loss_con<'t>(warped: Var<'t>, y: Var<'t>) -> Var<'t> {
    warped.l1_to(y)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SmoothnessNorm {
    /// `‖∇_h φ‖₂ + ‖∇_v φ‖₂` per pixel.
    #[default]
    Unsquared,
    /// `‖∇_h φ‖₂² + ‖∇_v φ‖₂²` per pixel.
    Squared,
}

/// Forward differences `(dh0, dh1, dv0, dv1)` of item `b` at pixel `k`.
fn forward_diffs(data: &[f64], b: usize, k: usize, h: usize, w: usize) -> [f64; 4] {
    let plane = h * w;
    let fb = &data[b * 2 * plane..(b + 1) * 2 * plane];
    let (i, j) = (k / w, k % w);
    let mut d = [0.0; 4];
    if j + 1 < w {
        d[0] = fb[k + 1] - fb[k];
        d[1] = fb[plane + k + 1] - fb[plane + k];
    }
    if i + 1 < h {
        d[2] = fb[k + w] - fb[k];
        d[3] = fb[plane + k + w] - fb[plane + k];
    }
    d
}

/// `L_smoo = (1/WH) Σ (‖∇_h φ‖₂ + ‖∇_v φ‖₂)`, averaged over the batch. Forward
/// differences; the difference past the last row or column is zero. The norm
/// runs over the two displacement channels.
pub fn loss_smoo(phi: Var<'_>, norm: SmoothnessNorm) -> Var<'_> {
    let f = phi.value();
    let (n, c, h, w) = f.dims4().expect("smoothness field");
    assert_eq!(c, 2, "smoothness loss expects a 2-plane field");
    let plane = h * w;
    let scale = 1.0 / (plane * n) as f64;
    let diffs = move |data: &[f64], b: usize, k: usize| forward_diffs(data, b, k, h, w);
    let mut total = 0.0;
    for b in 0..n {
        for k in 0..plane {
            let d = diffs(f.data(), b, k);
            total += match norm {
                SmoothnessNorm::Unsquared => d[0].hypot(d[1]) + d[2].hypot(d[3]),
                SmoothnessNorm::Squared => d.iter().map(|v| v * v).sum(),
            };
        }
    }
    let out = Tensor::scalar(total * scale);
    phi.tape().custom(&[phi], out, move |g, _| {
        let gs = g.item() * scale;
        let mut grad = vec![0.0; f.len()];
        for b in 0..n {
            for k in 0..plane {
                let d = diffs(f.data(), b, k);
                // Coefficients on each difference; a zero-length difference
                // gets the zero subgradient.
                let coef = match norm {
                    SmoothnessNorm::Unsquared => {
                        let (nh, nv) = (d[0].hypot(d[1]), d[2].hypot(d[3]));
                        let inv = |v: f64| if v > 0.0 { 1.0 / v } else { 0.0 };
                        [d[0] * inv(nh), d[1] * inv(nh), d[2] * inv(nv), d[3] * inv(nv)]
                    }
                    SmoothnessNorm::Squared => d.map(|v| 2.0 * v),
                };
                let base = b * 2 * plane;
                let (i, j) = (k / w, k % w);
                if j + 1 < w {
                    for ch in 0..2 {
                        grad[base + ch * plane + k + 1] += gs * coef[ch];
                        grad[base + ch * plane + k] -= gs * coef[ch];
                    }
                }
                if i + 1 < h {
                    for ch in 0..2 {
                        grad[base + ch * plane + k + w] += gs * coef[2 + ch];
                        grad[base + ch * plane + k] -= gs * coef[2 + ch];
                    }
                }
            }
        }
        vec![Some(Tensor::from_vec(&[n, 2, h, w], grad).expect("field grad"))]
    })
}

/// Scalar components of `L_P`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PairedTerms {
    pub adv: f64,
    pub kd: f64,
    pub cyc: f64,
    pub con: f64,
    pub smoo: f64,
}

pub fn paired_total(t: &PairedTerms, w: &LossWeights) -> f64 {
    unpaired_total(t.adv, t.kd, t.cyc, w) + w.con * t.con + w.smoo * t.smoo
}

/// `L_P = L_U + λ3·L_con + λ4·L_smoo`, with every term reported.
pub fn loss_paired(terms: PairedTerms, weights: &LossWeights) -> LossReport {
    LossReport {
        l_adv: terms.adv,
        l_kd: terms.kd,
        l_cyc: terms.cyc,
        l_con: terms.con,
        l_smoo: terms.smoo,
        l_u: unpaired_total(terms.adv, terms.kd, terms.cyc, weights),
        l_p: paired_total(&terms, weights),
        ..Default::default()
    }
}

/// Tape form of [`paired_total`], summed in the same order.
pub fn paired_objective<'t>(l_u: Var<'t>, con: Var<'t>, smoo: Var<'t>, w: &LossWeights) -> Var<'t> {
    l_u.add(con.mul_scalar(w.con)).add(smoo.mul_scalar(w.smoo))
}

/// The registration network `R`: a U-Net over `ŷ ⓒ y` whose zero-initialized
/// head makes the untrained field exactly zero.
#[derive(Debug)]
pub struct RegistrationNet {
    net: UNet,
}

impl RegistrationNet {
    pub fn new(width: usize, depth: usize, seed: u64) -> Result<Self> {
        let spec = UNetSpec { in_channels: 6, out_channels: 2, width, depth, head: UNetHead::ZeroLinear };
        Ok(RegistrationNet { net: UNet::new(spec, seed)? })
    }

    pub fn spec(&self) -> UNetSpec {
        self.net.spec()
    }

    /// `φ = R(ŷ, y)` on the tape, `[N, 2, H, W]` in pixels.
    pub fn field<'t>(&self, tape: &'t Tape, y_hat: Var<'t>, y: Var<'t>, trainable: bool) -> Var<'t> {
        self.apply(tape, tape.cat_channels(&[y_hat, y]), trainable)
    }
}

impl Network for RegistrationNet {
    fn params(&self) -> &stainkd_nn::ParamSet {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut stainkd_nn::ParamSet {
        self.net.params_mut()
    }

    fn forward<'t>(&self, p: &stainkd_nn::Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.net.forward(p, x)
    }
}

/// `φ = R(ŷ, y)` for two RGB images in network range.
pub fn register(r: &RegistrationNet, y_hat: &RasterImage, y: &RasterImage) -> Result<DeformationField> {
    for img in [y_hat, y] {
        img.expect_space(ColorSpace::Rgb)?;
        if img.range() != ValueRange::SIGNED {
            return Err(StainError::InvalidInput("registration inputs must be in [-1, 1]".into()));
        }
    }
    if !y_hat.same_size(y) {
        return Err(StainError::Shape(format!(
            "ŷ is {}x{} but y is {}x{}",
            y_hat.height(),
            y_hat.width(),
            y.height(),
            y.width()
        )));
    }
    let tape = Tape::inference(Precision::Single);
    let phi = r.field(&tape, tape.constant(y_hat.to_tensor()), tape.constant(y.to_tensor()), false);
    DeformationField::from_tensor(&phi.value(), 0)
}

/// Mean end-point error: average Euclidean distance between two fields.
pub fn end_point_error(a: &DeformationField, b: &DeformationField) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(StainError::Shape("fields differ in size".into()));
    }
    let plane = a.height * a.width;
    let total: f64 = (0..plane)
        .map(|k| (a.data[k] - b.data[k]).hypot(a.data[plane + k] - b.data[plane + k]))
        .sum();
    Ok(total / plane as f64)
}
