//! Network architectures: the ResNet-style generators, the patch
//! discriminator and the U-Net shared by the colorizer and the registration
//! network.

use serde::{Deserialize, Serialize};
use stainkd_nn::{Bound, Conv2d, ConvTranspose2d, Init, ParamSet, Tape, Var};

use crate::error::{Result, StainError};

/// Residual blocks in every generator trunk.
pub const RESIDUAL_BLOCKS: usize = 9;

const NORM_EPS: f64 = 1e-5;
const LEAKY_SLOPE: f64 = 0.2;
const INIT_STD: f64 = 0.02;

/// Something with parameters and a single-tensor forward pass.
pub trait Network {
    fn params(&self) -> &ParamSet;
    fn params_mut(&mut self) -> &mut ParamSet;
    fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t>;

    /// Binds the parameters and runs the network in one go.
    fn apply<'t>(&self, tape: &'t Tape, x: Var<'t>, trainable: bool) -> Var<'t> {
        let p = tape.bind(self.params(), trainable);
        self.forward(&p, x)
    }
}

/// Instance norm, skipped on single-pixel maps where it would zero everything.
fn norm(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    if s[2] * s[3] > 1 {
        x.instance_norm(NORM_EPS)
    } else {
        x
    }
}

fn check_size(what: &str, x: &Var<'_>, cin: usize, multiple: usize) {
    let s = x.shape();
    assert_eq!(s.len(), 4, "{what} expects [N, C, H, W]");
    assert_eq!(s[1], cin, "{what} expects {cin} input channels");
    assert!(
        s[2].is_multiple_of(multiple) && s[3].is_multiple_of(multiple),
        "{what} needs spatial size divisible by {multiple}, got {}x{}",
        s[2],
        s[3]
    );
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels after the stem; the trunk runs at four times this.
    pub width: usize,
}

impl GeneratorSpec {
    /// `G`: dark-field RGB plus the enhanced grey channel in, RGB out.
    pub fn student(width: usize) -> Self {
        GeneratorSpec { in_channels: 4, out_channels: 3, width }
    }

    /// `F`: stained RGB back to dark-field RGB.
    pub fn backward(width: usize) -> Self {
        GeneratorSpec { in_channels: 3, out_channels: 3, width }
    }
}

/// Stem, two stride-2 downsamplings, nine residual blocks, two stride-2
/// transposed convolutions and a `tanh` head. Sizes must be divisible by 4.
#[derive(Clone, Debug)]
pub struct ResnetGenerator {
    spec: GeneratorSpec,
    stem: Conv2d,
    down: [Conv2d; 2],
    blocks: Vec<[Conv2d; 2]>,
    up: [ConvTranspose2d; 2],
    head: Conv2d,
    params: ParamSet,
}

impl ResnetGenerator {
    pub fn new(spec: GeneratorSpec, seed: u64) -> Result<Self> {
        if spec.width == 0 || spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(StainError::InvalidInput(format!("degenerate generator {spec:?}")));
        }
        let mut p = ParamSet::new();
        let mut init = Init::normal(seed, INIT_STD);
        let w = spec.width;
        let stem = Conv2d::new(&mut p, &mut init, "stem", spec.in_channels, w, 7, 1, 0);
        let down = [
            Conv2d::new(&mut p, &mut init, "down0", w, 2 * w, 3, 2, 1),
            Conv2d::new(&mut p, &mut init, "down1", 2 * w, 4 * w, 3, 2, 1),
        ];
        let blocks = (0..RESIDUAL_BLOCKS)
            .map(|i| {
                [
                    Conv2d::new(&mut p, &mut init, &format!("block{i}.a"), 4 * w, 4 * w, 3, 1, 0),
                    Conv2d::new(&mut p, &mut init, &format!("block{i}.b"), 4 * w, 4 * w, 3, 1, 0),
                ]
            })
            .collect();
        let up = [
            ConvTranspose2d::new(&mut p, &mut init, "up0", 4 * w, 2 * w, 3, 2, 1, 1),
            ConvTranspose2d::new(&mut p, &mut init, "up1", 2 * w, w, 3, 2, 1, 1),
        ];
        let head = Conv2d::new(&mut p, &mut init, "head", w, spec.out_channels, 7, 1, 0);
        Ok(ResnetGenerator { spec, stem, down, blocks, up, head, params: p })
    }

    pub fn spec(&self) -> GeneratorSpec {
        self.spec
    }

    pub fn trunk_len(&self) -> usize {
        self.blocks.len()
    }
}

impl Network for ResnetGenerator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        check_size("generator", &x, self.spec.in_channels, 4);
        let mut h = norm(self.stem.forward(p, x.reflect_pad(3))).relu();
        for conv in &self.down {
            h = norm(conv.forward(p, h)).relu();
        }
        for [a, b] in &self.blocks {
            let r = norm(a.forward(p, h.reflect_pad(1))).relu();
            let r = norm(b.forward(p, r.reflect_pad(1)));
            h = h.add(r);
        }
        for conv in &self.up {
            h = norm(conv.forward(p, h)).relu();
        }
        self.head.forward(p, h.reflect_pad(3)).tanh()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub in_channels: usize,
    pub width: usize,
    pub kernel: usize,
    pub strides: [usize; 5],
}

impl DiscriminatorSpec {
    /// Five 4×4 convolutions, the first three with stride 2. Inputs need to
    /// be at least 32 pixels on a side.
    pub fn patch(in_channels: usize, width: usize) -> Self {
        DiscriminatorSpec { in_channels, width, kernel: 4, strides: [2, 2, 2, 1, 1] }
    }
}

/// Patch discriminator whose score is the mean of its patch map.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator {
    spec: DiscriminatorSpec,
    layers: Vec<Conv2d>,
    params: ParamSet,
}

impl PatchDiscriminator {
    pub fn new(spec: DiscriminatorSpec, seed: u64) -> Result<Self> {
        if spec.width == 0 || spec.kernel == 0 || spec.strides.contains(&0) {
            return Err(StainError::InvalidInput(format!("degenerate discriminator {spec:?}")));
        }
        let mut p = ParamSet::new();
        let mut init = Init::normal(seed, INIT_STD);
        let w = spec.width;
        let chans = [spec.in_channels, w, 2 * w, 4 * w, 8 * w, 1];
        let layers = (0..5)
            .map(|i| Conv2d::new(&mut p, &mut init, &format!("conv{i}"), chans[i], chans[i + 1], spec.kernel, spec.strides[i], 1))
            .collect();
        Ok(PatchDiscriminator { spec, layers, params: p })
    }

    pub fn spec(&self) -> DiscriminatorSpec {
        self.spec
    }

    /// Per-image score `[N]`.
    pub fn score<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        self.forward(p, x).mean_per_item()
    }
}

impl Network for PatchDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// The raw patch map `[N, 1, h, w]`.
    fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        check_size("discriminator", &x, self.spec.in_channels, 1);
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(p, h);
            if i == last {
                break;
            }
            if i > 0 {
                h = norm(h);
            }
            h = h.leaky_relu(LEAKY_SLOPE);
        }
        h
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UNetHead {
    /// Bounded output through `tanh`.
    Tanh,
    /// Linear output from a zero-initialized layer, so the net starts at zero.
    ZeroLinear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub width: usize,
    pub depth: usize,
    pub head: UNetHead,
}

impl UNetSpec {
    /// Spatial sizes must be multiples of this.
    pub fn multiple(&self) -> usize {
        1 << self.depth
    }

    fn channels(&self, level: usize) -> usize {
        self.width << level.min(3)
    }
}

struct UpLevel {
    upsample: ConvTranspose2d,
    fuse: Conv2d,
}

/// Encoder/decoder with skip connections. Downsampling uses stride-2 4×4
/// convolutions and upsampling stride-2 4×4 transposed convolutions.
pub struct UNet {
    spec: UNetSpec,
    input: Conv2d,
    down: Vec<Conv2d>,
    up: Vec<UpLevel>,
    head: Conv2d,
    params: ParamSet,
}

impl std::fmt::Debug for UNet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("UNet").field("spec", &self.spec).field("params", &self.params.numel()).finish()
    }
}

impl UNet {
    pub fn new(spec: UNetSpec, seed: u64) -> Result<Self> {
        if spec.width == 0 || spec.depth == 0 || spec.in_channels == 0 || spec.out_channels == 0 {
            return Err(StainError::InvalidInput(format!("degenerate U-Net {spec:?}")));
        }
        let mut p = ParamSet::new();
        let mut init = Init::normal(seed, INIT_STD);
        let input = Conv2d::new(&mut p, &mut init, "input", spec.in_channels, spec.width, 3, 1, 1);
        let down = (1..=spec.depth)
            .map(|k| Conv2d::new(&mut p, &mut init, &format!("down{k}"), spec.channels(k - 1), spec.channels(k), 4, 2, 1))
            .collect();
        let up = (1..=spec.depth)
            .rev()
            .map(|k| {
                let (hi, lo) = (spec.channels(k), spec.channels(k - 1));
                UpLevel {
                    upsample: ConvTranspose2d::new(&mut p, &mut init, &format!("up{k}"), hi, lo, 4, 2, 1, 0),
                    fuse: Conv2d::new(&mut p, &mut init, &format!("fuse{k}"), 2 * lo, lo, 3, 1, 1),
                }
            })
            .collect();
        let head = match spec.head {
            UNetHead::Tanh => Conv2d::new(&mut p, &mut init, "head", spec.width, spec.out_channels, 1, 1, 0),
            UNetHead::ZeroLinear => Conv2d::zeroed(&mut p, "head", spec.width, spec.out_channels, 1, 1, 0),
        };
        Ok(UNet { spec, input, down, up, head, params: p })
    }

    pub fn spec(&self) -> UNetSpec {
        self.spec
    }
}

impl Network for UNet {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn forward<'t>(&self, p: &Bound<'t, '_>, x: Var<'t>) -> Var<'t> {
        check_size("U-Net", &x, self.spec.in_channels, self.spec.multiple());
        let tape = p.tape();
        let mut skips = vec![self.input.forward(p, x).leaky_relu(LEAKY_SLOPE)];
        for conv in &self.down {
            let h = norm(conv.forward(p, *skips.last().expect("non-empty"))).leaky_relu(LEAKY_SLOPE);
            skips.push(h);
        }
        let mut h = skips.pop().expect("bottleneck");
        for level in &self.up {
            let skip = skips.pop().expect("one skip per level");
            let u = norm(level.upsample.forward(p, h)).relu();
            h = norm(level.fuse.forward(p, tape.cat_channels(&[u, skip]))).relu();
        }
        let out = self.head.forward(p, h);
        match self.spec.head {
            UNetHead::Tanh => out.tanh(),
            UNetHead::ZeroLinear => out,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use stainkd_nn::{Precision, Tensor};

    fn run(net: &impl Network, shape: &[usize]) -> Tensor {
        let tape = Tape::inference(Precision::Single);
        let x = tape.constant(Tensor::full(shape, 0.3));
        (*net.apply(&tape, x, false).value()).clone()
    }

    #[test]
    fn generator_preserves_spatial_size() {
        let g = ResnetGenerator::new(GeneratorSpec::student(2), 1).unwrap();
        assert_eq!(g.trunk_len(), 9);
        for (h, w) in [(8, 8), (12, 16), (32, 20)] {
            assert_eq!(run(&g, &[2, 4, h, w]).shape(), &[2, 3, h, w]);
        }
    }

    #[test]
    fn discriminator_scores_are_finite_per_image() {
        let d = PatchDiscriminator::new(DiscriminatorSpec::patch(3, 2), 3).unwrap();
        let tape = Tape::inference(Precision::Single);
        let p = tape.bind(d.params(), false);
        let s = d.score(&p, tape.constant(Tensor::full(&[3, 3, 32, 32], -0.2)));
        assert_eq!(s.shape(), vec![3]);
        assert!(s.value().is_finite());
    }

    #[test]
    fn unet_preserves_spatial_size() {
        let spec = UNetSpec { in_channels: 1, out_channels: 2, width: 2, depth: 4, head: UNetHead::Tanh };
        let net = UNet::new(spec, 5).unwrap();
        for s in [16, 32, 48] {
            assert_eq!(run(&net, &[1, 1, s, s]).shape(), &[1, 2, s, s]);
        }
    }

    #[test]
    fn zero_head_unet_outputs_zero() {
        let spec = UNetSpec { in_channels: 6, out_channels: 2, width: 2, depth: 2, head: UNetHead::ZeroLinear };
        let out = run(&UNet::new(spec, 9).unwrap(), &[1, 6, 8, 8]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_weights() {
        let a = ResnetGenerator::new(GeneratorSpec::backward(2), 7).unwrap();
        let b = ResnetGenerator::new(GeneratorSpec::backward(2), 7).unwrap();
        assert!(a.params().iter().zip(b.params().iter()).all(|(x, y)| x == y));
    }
}
