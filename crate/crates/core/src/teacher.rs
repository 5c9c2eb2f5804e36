//! The teacher: light enhancement `H` followed by a colorizer `G_t` that
//! predicts the missing Lab chrominance from luminance.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stainkd_nn::{Adam, AdamConfig, Precision, Tape, Tensor};

use crate::enhance::LightEnhancer;
use crate::error::{Result, StainError};
use crate::image::{lab_to_rgb, rgb_to_lab, ColorSpace, LabImage, RasterImage, ValueRange};
use crate::nets::{Network, UNet, UNetHead, UNetSpec};

/// Chrominance is divided by this before it meets the `tanh` head.
pub const CHROMA_SCALE: f64 = 128.0;

/// Divergence guard: abort once the loss stays above this multiple of the
/// first epoch's loss for `DIVERGENCE_PATIENCE` epochs in a row.
const DIVERGENCE_FACTOR: f64 = 10.0;
const DIVERGENCE_PATIENCE: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColorizerSpec {
    pub width: usize,
    pub depth: usize,
}

impl ColorizerSpec {
    pub fn unet(&self) -> UNetSpec {
        UNetSpec { in_channels: 1, out_channels: 2, width: self.width, depth: self.depth, head: UNetHead::Tanh }
    }
}

/// Luminance of a stained image with its chrominance as the target.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayColorPair {
    /// `L / 100` in `[0, 1]`.
    pub gray: RasterImage,
    /// Interleaved `(a, b)` per pixel, in Lab units.
    pub target_chroma: Vec<f64>,
}

impl GrayColorPair {
    /// `[1, 1, H, W]` network input in `[-1, 1]`.
    pub fn input(&self) -> Tensor {
        self.gray.to_tensor().map(|v| 2.0 * v - 1.0)
    }

    /// `[1, 2, H, W]` target, scaled by `1 / CHROMA_SCALE`.
    pub fn target(&self) -> Tensor {
        planar_chroma(&self.target_chroma, self.gray.height(), self.gray.width())
    }

    pub fn to_lab(&self) -> LabImage {
        let l = self.gray.data().iter().map(|v| v * 100.0).collect();
        LabImage::new(self.gray.height(), self.gray.width(), l, self.target_chroma.clone()).expect("pair planes")
    }
}

fn planar_chroma(ab: &[f64], h: usize, w: usize) -> Tensor {
    let plane = h * w;
    let mut out = vec![0.0; 2 * plane];
    for (k, pair) in ab.chunks_exact(2).enumerate() {
        out[k] = pair[0] / CHROMA_SCALE;
        out[plane + k] = pair[1] / CHROMA_SCALE;
    }
    Tensor::from_vec(&[1, 2, h, w], out).expect("chroma shape")
}

/// Splits every stained image into luminance input and chrominance target.
pub fn make_gray_pairs(stained: &[RasterImage]) -> Result<Vec<GrayColorPair>> {
    if stained.is_empty() {
        return Err(StainError::Empty { what: "stained corpus" });
    }
    stained
        .iter()
        .map(|img| {
            let lab = rgb_to_lab(img)?;
            Ok(GrayColorPair { gray: lab.luminance_image(), target_chroma: lab.chrominance })
        })
        .collect()
}

/// `G_t`: predicts `(a, b) / 128` from `L / 100` mapped to `[-1, 1]`.
#[derive(Debug)]
pub struct Colorizer {
    spec: ColorizerSpec,
    net: UNet,
}

impl Colorizer {
    pub fn new(spec: ColorizerSpec, seed: u64) -> Result<Self> {
        Ok(Colorizer { spec, net: UNet::new(spec.unet(), seed)? })
    }

    pub fn spec(&self) -> ColorizerSpec {
        self.spec
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut UNet {
        &mut self.net
    }

    /// Normalized chrominance `[N, 2, H, W]` for a `[N, 1, H, W]` input.
    pub fn predict(&self, gray: &Tensor) -> Tensor {
        let tape = Tape::inference(Precision::Single);
        let x = tape.constant(gray.clone());
        let out = self.net.apply(&tape, x, false).value();
        (*out).clone()
    }

    /// Colors a grey image: its value becomes `L / 100` and the predicted
    /// chrominance is attached.
    pub fn colorize(&self, gray: &RasterImage) -> Result<RasterImage> {
        gray.expect_space(ColorSpace::Gray)?;
        let (h, w) = (gray.height(), gray.width());
        let m = self.spec.unet().multiple();
        let padded = gray.edge_pad(h.div_ceil(m) * m, w.div_ceil(m) * m)?;
        let pred = self.predict(&padded.to_tensor().map(|v| 2.0 * v - 1.0));
        let pw = padded.width();
        let pplane = padded.height() * pw;
        let mut chroma = Vec::with_capacity(2 * h * w);
        for i in 0..h {
            for j in 0..w {
                let k = i * pw + j;
                chroma.push(pred.data()[k] * CHROMA_SCALE);
                chroma.push(pred.data()[pplane + k] * CHROMA_SCALE);
            }
        }
        let l = gray.data().iter().map(|v| v * 100.0).collect();
        Ok(lab_to_rgb(&LabImage::new(h, w, l, chroma)?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColorizerTraining {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
}

/// Minimizes the mean absolute chrominance error. Returns the colorizer and
/// the mean training loss of every epoch.
pub fn train_colorizer(
    pairs: &[GrayColorPair],
    spec: ColorizerSpec,
    cfg: &ColorizerTraining,
) -> Result<(Colorizer, Vec<f64>)> {
    train_colorizer_with(pairs, spec, cfg, |_, _| {})
}

/// [`train_colorizer`] with a per-epoch callback `(epoch, loss)`.
pub fn train_colorizer_with(
    pairs: &[GrayColorPair],
    spec: ColorizerSpec,
    cfg: &ColorizerTraining,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(Colorizer, Vec<f64>)> {
    if pairs.is_empty() {
        return Err(StainError::Empty { what: "gray-color pairs" });
    }
    if cfg.batch == 0 || !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(StainError::InvalidInput(format!("bad colorizer training settings {cfg:?}")));
    }
    let mut colorizer = Colorizer::new(spec, cfg.seed)?;
    let mut adam = Adam::new(colorizer.net.params(), AdamConfig::default());
    let inputs: Vec<Tensor> = pairs.iter().map(GrayColorPair::input).collect();
    let targets: Vec<Tensor> = pairs.iter().map(GrayColorPair::target).collect();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut over = 0usize;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch) {
            let x = Tensor::cat_batch(&chunk.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
            let t = Tensor::cat_batch(&chunk.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;
            let tape = Tape::new(Precision::Single);
            let pred = colorizer.net.apply(&tape, tape.constant(x), true);
            let loss = pred.l1_to(tape.constant(t));
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(StainError::Diverged {
                    at: format!("colorizer epoch {epoch}"),
                    detail: format!("loss is {value}"),
                });
            }
            let grads = tape.backward(loss).for_params(colorizer.net.params());
            drop(tape);
            adam.step(colorizer.net.params_mut(), &grads, cfg.lr);
            sum += value;
            batches += 1;
        }
        let mean = sum / batches as f64;
        on_epoch(epoch, mean);
        losses.push(mean);
        if mean > DIVERGENCE_FACTOR * losses[0] {
            over += 1;
            if over >= DIVERGENCE_PATIENCE {
                return Err(StainError::Diverged {
                    at: format!("colorizer epoch {epoch}"),
                    detail: format!(
                        "loss {mean:.4} stayed above {DIVERGENCE_FACTOR}x the initial {:.4} for {DIVERGENCE_PATIENCE} epochs",
                        losses[0]
                    ),
                });
            }
        } else {
            over = 0;
        }
    }
    Ok((colorizer, losses))
}

/// Mean absolute chrominance error of `colorizer` on `pairs`, in the same
/// normalized units as training.
pub fn colorizer_loss(colorizer: &Colorizer, pairs: &[GrayColorPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(StainError::Empty { what: "gray-color pairs" });
    }
    let mut total = 0.0;
    for p in pairs {
        let pred = colorizer.predict(&p.input());
        let target = p.target();
        total += pred.zip_map(&target, |a, b| (a - b).abs()).mean();
    }
    Ok(total / pairs.len() as f64)
}

/// `H` followed by `G_t`.
#[derive(Debug)]
pub struct Teacher {
    pub enhancer: LightEnhancer,
    pub colorizer: Colorizer,
}

impl Teacher {
    /// `(z, y_t)` with `z = H(x)` and `y_t = lab_to_rgb(z ⊕ G_t(z))`.
    pub fn stain(&self, x: &RasterImage) -> Result<(RasterImage, RasterImage)> {
        let z = self.enhancer.apply(x)?;
        let y_t = self.colorizer.colorize(&z)?;
        Ok((z, y_t))
    }
}

/// Mean `|L(y_t)/100 − z|` over pixels.
pub fn luminance_gap(y_t: &RasterImage, z: &RasterImage) -> Result<f64> {
    let lab = rgb_to_lab(y_t)?;
    if z.space() != ColorSpace::Gray || z.range() != ValueRange::UNIT || !y_t.same_size(z) {
        return Err(StainError::InvalidInput("z must be a [0, 1] grey image the size of y_t".into()));
    }
    let n = lab.luminance.len() as f64;
    Ok(lab.luminance.iter().zip(z.data()).map(|(l, z)| (l / 100.0 - z).abs()).sum::<f64>() / n)
}
