//! Raster images, value-range conventions and colour conversions.
//!
//! Images are stored in `[0, 1]`; the `[-1, 1]` network domain only appears at
//! network boundaries through [`rescale`] and the tensor helpers below.

use std::path::Path;

use stainkd_nn::Tensor;

use crate::error::{file_err, Result, StainError};

const RANGE_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ColorSpace {
    Rgb,
    Gray,
    Lab,
    /// Two displacement planes; values are unbounded pixels.
    Displacement,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Gray => 1,
            ColorSpace::Displacement => 2,
            ColorSpace::Rgb | ColorSpace::Lab => 3,
        }
    }
}

/// Closed interval every sample of an image lies in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueRange {
    pub lo: f64,
    pub hi: f64,
}

impl ValueRange {
    /// Storage range.
    pub const UNIT: ValueRange = ValueRange { lo: 0.0, hi: 1.0 };
    /// Network range.
    pub const SIGNED: ValueRange = ValueRange { lo: -1.0, hi: 1.0 };
    pub const UNBOUNDED: ValueRange = ValueRange { lo: f64::NEG_INFINITY, hi: f64::INFINITY };

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    fn contains(&self, v: f64) -> bool {
        v >= self.lo - RANGE_TOLERANCE && v <= self.hi + RANGE_TOLERANCE
    }
}

/// An `H × W × C` image with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RasterImage {
    height: usize,
    width: usize,
    space: ColorSpace,
    range: ValueRange,
    data: Vec<f64>,
}

impl RasterImage {
    pub fn new(
        height: usize,
        width: usize,
        space: ColorSpace,
        range: ValueRange,
        data: Vec<f64>,
    ) -> Result<Self> {
        let channels = space.channels();
        if data.len() != height * width * channels {
            return Err(StainError::Shape(format!(
                "{height}x{width}x{channels} image needs {} samples, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !range.contains(**v)) {
            return Err(StainError::InvalidInput(format!(
                "sample {bad} outside declared range [{}, {}]",
                range.lo, range.hi
            )));
        }
        Ok(RasterImage { height, width, space, range, data })
    }

    pub fn filled(height: usize, width: usize, space: ColorSpace, value: f64) -> Result<Self> {
        let n = height * width * space.channels();
        Self::new(height, width, space, ValueRange::UNIT, vec![value; n])
    }

    pub fn rgb(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, ColorSpace::Rgb, ValueRange::UNIT, data)
    }

    pub fn gray(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(height, width, ColorSpace::Gray, ValueRange::UNIT, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.space.channels()
    }

    pub fn space(&self) -> ColorSpace {
        self.space
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let i = (row * self.width + col) * c;
        &self.data[i..i + c]
    }

    pub fn same_size(&self, other: &RasterImage) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Grey image replicated to three channels.
    pub fn gray_to_rgb(&self) -> Result<RasterImage> {
        self.expect_space(ColorSpace::Gray)?;
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RasterImage::new(self.height, self.width, ColorSpace::Rgb, self.range, data)
    }

    pub(crate) fn expect_space(&self, space: ColorSpace) -> Result<()> {
        if self.space != space {
            return Err(StainError::InvalidInput(format!(
                "expected a {space:?} image, got {:?}",
                self.space
            )));
        }
        Ok(())
    }

    /// The `height × width` window whose top-left corner is `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Result<RasterImage> {
        if row + height > self.height || col + width > self.width {
            return Err(StainError::Shape(format!(
                "crop {height}x{width}@({row},{col}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for r in row..row + height {
            let start = (r * self.width + col) * c;
            data.extend_from_slice(&self.data[start..start + width * c]);
        }
        RasterImage::new(height, width, self.space, self.range, data)
    }

    /// Grows the image to `height × width` by repeating its last row and column.
    pub fn edge_pad(&self, height: usize, width: usize) -> Result<RasterImage> {
        if height < self.height || width < self.width {
            return Err(StainError::Shape("edge padding cannot shrink an image".into()));
        }
        let c = self.channels();
        let mut data = Vec::with_capacity(height * width * c);
        for r in 0..height {
            for col in 0..width {
                data.extend_from_slice(self.pixel(r.min(self.height - 1), col.min(self.width - 1)));
            }
        }
        RasterImage::new(height, width, self.space, self.range, data)
    }

    /// Planar `[1, C, H, W]` tensor holding the raw sample values.
    pub fn to_tensor(&self) -> Tensor {
        let c = self.channels();
        let plane = self.height * self.width;
        let mut out = vec![0.0; c * plane];
        for (i, px) in self.data.chunks_exact(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                out[ch * plane + i] = v;
            }
        }
        Tensor::from_vec(&[1, c, self.height, self.width], out).expect("planar shape")
    }

    /// Item `index` of a `[N, C, H, W]` tensor, declared in `range`.
    pub fn from_tensor(t: &Tensor, index: usize, space: ColorSpace, range: ValueRange) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if index >= n || c != space.channels() {
            return Err(StainError::Shape(format!(
                "tensor {:?} has no {space:?} item {index}",
                t.shape()
            )));
        }
        let plane = h * w;
        let base = index * c * plane;
        let mut data = vec![0.0; c * plane];
        for ch in 0..c {
            for i in 0..plane {
                data[i * c + ch] = t.data()[base + ch * plane + i];
            }
        }
        RasterImage::new(h, w, space, range, data)
    }
}

/// Stacks same-sized images into a `[N, C, H, W]` tensor mapped from `[0, 1]`
/// storage to the `[-1, 1]` network domain.
pub fn to_network(images: &[&RasterImage]) -> Result<Tensor> {
    let mut items = Vec::with_capacity(images.len());
    for img in images {
        items.push(rescale(img, ValueRange::UNIT, ValueRange::SIGNED)?.to_tensor());
    }
    Ok(Tensor::cat_batch(&items)?)
}

/// Item `index` of a network-domain tensor back in `[0, 1]` storage, clamped.
pub fn from_network(t: &Tensor, index: usize, space: ColorSpace) -> Result<RasterImage> {
    let clamped = t.map(|v| v.clamp(-1.0, 1.0));
    let img = RasterImage::from_tensor(&clamped, index, space, ValueRange::SIGNED)?;
    rescale(&img, ValueRange::SIGNED, ValueRange::UNIT)
}

/// BT.601 luma of an RGB image.
pub fn to_grayscale(img: &RasterImage) -> Result<RasterImage> {
    img.expect_space(ColorSpace::Rgb)?;
    // Integer weights keep white at exactly one.
    let data = img
        .data
        .chunks_exact(3)
        .map(|p| ((299.0 * p[0] + 587.0 * p[1] + 114.0 * p[2]) / 1000.0).clamp(img.range.lo, img.range.hi))
        .collect();
    RasterImage::new(img.height, img.width, ColorSpace::Gray, img.range, data)
}

/// Grey view of an image: RGB is converted, grey passes through.
pub fn luminance_of(img: &RasterImage) -> Result<RasterImage> {
    match img.space {
        ColorSpace::Gray => Ok(img.clone()),
        ColorSpace::Rgb => to_grayscale(img),
        other => Err(StainError::InvalidInput(format!("no illuminance for {other:?} images"))),
    }
}

/// Affine map of every sample from `from` onto `to`. Endpoints map exactly.
pub fn rescale(img: &RasterImage, from: ValueRange, to: ValueRange) -> Result<RasterImage> {
    if from != img.range {
        return Err(StainError::InvalidInput(format!(
            "image is declared in [{}, {}], not [{}, {}]",
            img.range.lo, img.range.hi, from.lo, from.hi
        )));
    }
    let data = img.data.iter().map(|&v| rescale_value(v, from, to)).collect::<Result<Vec<_>>>()?;
    RasterImage::new(img.height, img.width, img.space, to, data)
}

pub fn rescale_value(v: f64, from: ValueRange, to: ValueRange) -> Result<f64> {
    let span = from.width();
    if !span.is_finite() || span.abs() <= f64::EPSILON {
        return Err(StainError::InvalidInput(format!(
            "degenerate source range [{}, {}]",
            from.lo, from.hi
        )));
    }
    if v == from.lo {
        return Ok(to.lo);
    }
    if v == from.hi {
        return Ok(to.hi);
    }
    let t = (v - from.lo) / span;
    Ok(to.lo + t * to.width())
}

// --- CIE L*a*b* (D65) -------------------------------------------------------

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

/// D65 white, taken as the image of RGB white so that white maps to a = b = 0.
fn white() -> [f64; 3] {
    RGB_TO_XYZ.map(|row| row.iter().sum())
}

const DELTA: f64 = 6.0 / 29.0;

fn srgb_to_linear(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(c: f64) -> f64 {
    if c <= 0.0031308 {
        12.92 * c
    } else {
        1.055 * c.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > DELTA * DELTA * DELTA {
        t.cbrt()
    } else {
        t / (3.0 * DELTA * DELTA) + 4.0 / 29.0
    }
}

fn lab_f_inv(t: f64) -> f64 {
    if t > DELTA {
        t * t * t
    } else {
        3.0 * DELTA * DELTA * (t - 4.0 / 29.0)
    }
}

/// One sRGB pixel in `[0, 1]` to `(L, a, b)`.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let xyz = RGB_TO_XYZ.map(|row| row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2]);
    let wp = white();
    let f = [lab_f(xyz[0] / wp[0]), lab_f(xyz[1] / wp[1]), lab_f(xyz[2] / wp[2])];
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// One `(L, a, b)` triple to sRGB, clamped into `[0, 1]`.
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let wp = white();
    let xyz = [wp[0] * lab_f_inv(fx), wp[1] * lab_f_inv(fy), wp[2] * lab_f_inv(fz)];
    XYZ_TO_RGB
        .map(|row| row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2])
        .map(|c| linear_to_srgb(c.max(0.0)).clamp(0.0, 1.0))
}

/// Luminance and chrominance planes of a CIE L*a*b* image.
#[derive(Clone, Debug, PartialEq)]
pub struct LabImage {
    pub height: usize,
    pub width: usize,
    /// `L` per pixel, in `[0, 100]`.
    pub luminance: Vec<f64>,
    /// Interleaved `(a, b)` per pixel.
    pub chrominance: Vec<f64>,
}

impl LabImage {
    pub fn new(height: usize, width: usize, luminance: Vec<f64>, chrominance: Vec<f64>) -> Result<Self> {
        if luminance.len() != height * width || chrominance.len() != 2 * height * width {
            return Err(StainError::Shape(format!(
                "lab planes of {} and {} samples for {height}x{width}",
                luminance.len(),
                chrominance.len()
            )));
        }
        Ok(LabImage { height, width, luminance, chrominance })
    }

    /// `L / 100` as a grey image in `[0, 1]`.
    pub fn luminance_image(&self) -> RasterImage {
        let data = self.luminance.iter().map(|l| (l / 100.0).clamp(0.0, 1.0)).collect();
        RasterImage::gray(self.height, self.width, data).expect("luminance in range")
    }
}

pub fn rgb_to_lab(img: &RasterImage) -> Result<LabImage> {
    img.expect_space(ColorSpace::Rgb)?;
    let n = img.height * img.width;
    let mut luminance = Vec::with_capacity(n);
    let mut chrominance = Vec::with_capacity(2 * n);
    for p in img.data.chunks_exact(3) {
        let [l, a, b] = rgb_pixel_to_lab([p[0], p[1], p[2]]);
        luminance.push(l);
        chrominance.push(a);
        chrominance.push(b);
    }
    LabImage::new(img.height, img.width, luminance, chrominance)
}

pub fn lab_to_rgb(lab: &LabImage) -> RasterImage {
    let data = lab
        .luminance
        .iter()
        .zip(lab.chrominance.chunks_exact(2))
        .flat_map(|(&l, ab)| lab_pixel_to_rgb([l, ab[0], ab[1]]))
        .collect();
    RasterImage::rgb(lab.height, lab.width, data).expect("clamped rgb")
}

// --- PNG --------------------------------------------------------------------

/// Reads an 8-bit PNG as `space` (grey or RGB), mapping `[0, 255]` to `[0, 1]`.
pub fn load_png(path: &Path, space: ColorSpace) -> Result<RasterImage> {
    let decoded = image::open(path).map_err(|source| StainError::Image { path: path.into(), source })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let data: Vec<f64> = match space {
        ColorSpace::Gray => decoded.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        ColorSpace::Rgb => decoded.to_rgb8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        other => return Err(StainError::InvalidInput(format!("cannot load {other:?} from PNG"))),
    };
    RasterImage::new(h, w, space, ValueRange::UNIT, data)
}

/// Quantizes a `[0, 1]` sample to 8 bits, rounding half up.
pub fn quantize_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Writes a grey or RGB `[0, 1]` image as an 8-bit PNG.
pub fn save_png(img: &RasterImage, path: &Path) -> Result<()> {
    if img.range != ValueRange::UNIT {
        return Err(StainError::InvalidInput("PNG output expects [0, 1] storage range".into()));
    }
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize_u8(v)).collect();
    let (w, h) = (img.width as u32, img.height as u32);
    let color = match img.space {
        ColorSpace::Gray => image::ExtendedColorType::L8,
        ColorSpace::Rgb => image::ExtendedColorType::Rgb8,
        other => return Err(StainError::InvalidInput(format!("cannot save {other:?} as PNG"))),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(file_err(parent))?;
    }
    image::save_buffer(path, &bytes, w, h, color)
        .map_err(|source| StainError::Image { path: path.into(), source })
}
