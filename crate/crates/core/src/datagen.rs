//! Synthetic datasets: a procedural stained-tissue corpus, dark-field images
//! fabricated from it, and smooth random warps standing in for the
//! deformation between adjacent tissue sections.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stainkd_nn::Tensor;

use crate::align::{resample_image, DeformationField};
use crate::enhance::{estimate_cdf, synthesize_darkfield, IlluminanceCdf, LightEnhancer};
use crate::error::{file_err, Result, StainError};
use crate::image::{load_png, quantize_u8, save_png, to_network, ColorSpace, RasterImage, ValueRange};

/// Image side used by the default configuration.
pub const DEFAULT_SIZE: usize = 256;

// Stream offsets keep the corpus, split and warp RNGs independent.
const CORPUS_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1 << 32;
const WARP_STREAM: u64 = 2 << 32;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Cell-like H&E textures: pink cytoplasm ellipses with purple nuclei over a
/// pale background streaked with stroma.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProceduralCorpus {
    pub size: usize,
    pub seed: u64,
}

impl ProceduralCorpus {
    pub fn image(&self, index: usize) -> Result<RasterImage> {
        if self.size < 8 {
            return Err(StainError::InvalidInput(format!("corpus images need at least 8 px, got {}", self.size)));
        }
        let mut rng = stream(self.seed, CORPUS_STREAM + index as u64);
        let n = self.size;
        let jitter = |rng: &mut ChaCha8Rng, c: [f64; 3], a: f64| c.map(|v| (v + rng.random_range(-a..a)).clamp(0.0, 1.0));
        let background = jitter(&mut rng, [0.94, 0.87, 0.91], 0.02);
        let stroma = jitter(&mut rng, [0.88, 0.64, 0.77], 0.04);
        let mut data = stroma_field(&mut rng, n, background, stroma);
        let cells = (n * n / 160).max(3) + rng.random_range(0..=n * n / 320);
        let (r_lo, r_hi) = (n as f64 / 22.0, n as f64 / 10.0);
        for _ in 0..cells {
            let cy = rng.random_range(0.0..n as f64);
            let cx = rng.random_range(0.0..n as f64);
            let ry = rng.random_range(r_lo..r_hi);
            let rx = ry * rng.random_range(0.6..1.4);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let cytoplasm = jitter(&mut rng, [0.86, 0.52, 0.70], 0.06);
            let nucleus = jitter(&mut rng, [0.38, 0.20, 0.55], 0.06);
            let shrink = rng.random_range(0.35..0.55);
            let offset = (rng.random_range(-0.2..0.2) * rx, rng.random_range(-0.2..0.2) * ry);
            paint_ellipse(&mut data, n, (cx, cy), (rx, ry), theta, cytoplasm);
            let nc = (cx + offset.0, cy + offset.1);
            paint_ellipse(&mut data, n, nc, (rx * shrink, ry * shrink), theta, nucleus);
        }
        let noise = Normal::new(0.0, 0.015).expect("valid sigma");
        for v in &mut data {
            *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
        }
        RasterImage::rgb(n, n, data).map(|img| on_u8_grid(&img))
    }

    pub fn generate(&self, count: usize) -> Result<Vec<RasterImage>> {
        (0..count).map(|i| self.image(i)).collect()
    }
}

/// Pale background blended with eosin-pink stroma by a smooth random field
/// (a sum of plane waves with wavelengths between `n/8` and `n/2`).
fn stroma_field(rng: &mut ChaCha8Rng, n: usize, background: [f64; 3], stroma: [f64; 3]) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..6)
        .map(|_| {
            let k = std::f64::consts::TAU / (n as f64 * rng.random_range(0.125..0.5));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            (k * angle.cos(), k * angle.sin(), rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let mut data = Vec::with_capacity(n * n * 3);
    for i in 0..n {
        for j in 0..n {
            let s: f64 = waves.iter().map(|(kx, ky, p)| (kx * j as f64 + ky * i as f64 + p).cos()).sum::<f64>() / 6.0;
            let t = (0.5 + 1.2 * s).clamp(0.0, 1.0);
            data.extend((0..3).map(|k| background[k] * (1.0 - t) + stroma[k] * t));
        }
    }
    data
}

/// Anti-aliased ellipse, blended over `data` (RGB, `n × n`).
fn paint_ellipse(data: &mut [f64], n: usize, c: (f64, f64), r: (f64, f64), theta: f64, color: [f64; 3]) {
    let (sin, cos) = theta.sin_cos();
    let reach = r.0.max(r.1) + 1.0;
    let rows = (c.1 - reach).floor().max(0.0) as usize..((c.1 + reach).ceil().max(0.0) as usize).min(n);
    let cols = (c.0 - reach).floor().max(0.0) as usize..((c.0 + reach).ceil().max(0.0) as usize).min(n);
    for i in rows {
        for j in cols.clone() {
            let (dx, dy) = (j as f64 + 0.5 - c.0, i as f64 + 0.5 - c.1);
            let u = (dx * cos + dy * sin) / r.0;
            let v = (-dx * sin + dy * cos) / r.1;
            let d = (u * u + v * v).sqrt();
            // Roughly one pixel of soft edge.
            let alpha = ((1.0 - d) * r.0.min(r.1) + 0.5).clamp(0.0, 1.0);
            if alpha > 0.0 {
                let px = &mut data[(i * n + j) * 3..(i * n + j) * 3 + 3];
                for k in 0..3 {
                    px[k] = px[k] * (1.0 - alpha) + color[k] * alpha;
                }
            }
        }
    }
}

/// Snaps every sample to the 8-bit grid so a PNG round trip is lossless.
fn on_u8_grid(img: &RasterImage) -> RasterImage {
    let data = img.data().iter().map(|&v| quantize_u8(v) as f64 / 255.0).collect();
    RasterImage::new(img.height(), img.width(), img.space(), ValueRange::UNIT, data).expect("same layout")
}

/// Loads every PNG in `dir` (sorted by name), centre-cropped to `size`.
pub fn load_corpus(dir: &Path, size: usize) -> Result<Vec<RasterImage>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(file_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let img = load_png(p, ColorSpace::Rgb)?;
            if img.height() < size || img.width() < size {
                return Err(StainError::InvalidInput(format!(
                    "{} is {}x{}, smaller than {size}",
                    p.display(),
                    img.height(),
                    img.width()
                )));
            }
            img.crop((img.height() - size) / 2, (img.width() - size) / 2, size, size)
        })
        .collect()
}

/// Hex SHA-256 over the sizes and 8-bit samples of a corpus.
pub fn corpus_hash(corpus: &[RasterImage]) -> String {
    let mut h = Sha256::new();
    for img in corpus {
        h.update((img.height() as u64).to_le_bytes());
        h.update((img.width() as u64).to_le_bytes());
        h.update((img.channels() as u64).to_le_bytes());
        h.update(img.data().iter().map(|&v| quantize_u8(v)).collect::<Vec<u8>>());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Random control-grid displacements, interpolated and Gaussian-smoothed
/// into a dense field whose magnitude never exceeds `max_displacement`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothWarp {
    pub max_displacement: f64,
    /// Control-point spacing in pixels.
    pub spacing: usize,
}

impl SmoothWarp {
    /// The default for `size`: 8 px at 256², scaled linearly.
    pub fn for_size(size: usize) -> Self {
        SmoothWarp { max_displacement: 8.0 * size as f64 / DEFAULT_SIZE as f64, spacing: (size / 8).max(2) }
    }

    /// Draws a field. The peak magnitude is uniform in
    /// `[max/2, max]`. Values are rounded to `f32`, the stored precision.
    pub fn sample(&self, height: usize, width: usize, rng: &mut impl Rng) -> Result<DeformationField> {
        if !(self.max_displacement >= 0.0 && self.max_displacement.is_finite()) || self.spacing == 0 {
            return Err(StainError::InvalidInput(format!("invalid warp parameters {self:?}")));
        }
        if self.max_displacement == 0.0 {
            return Ok(DeformationField::zeros(height, width));
        }
        let s = self.spacing as f64;
        let (gh, gw) = (height.div_ceil(self.spacing) + 1, width.div_ceil(self.spacing) + 1);
        let mut data = Vec::with_capacity(2 * height * width);
        for _ in 0..2 {
            let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut dense = Vec::with_capacity(height * width);
            for i in 0..height {
                for j in 0..width {
                    let (y, x) = (i as f64 / s, j as f64 / s);
                    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
                    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
                    let g = |r: usize, c: usize| grid[r.min(gh - 1) * gw + c.min(gw - 1)];
                    let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
                    let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
                    dense.push(top * (1.0 - fy) + bottom * fy);
                }
            }
            data.extend(gaussian_blur(&dense, height, width, s / 2.0));
        }
        let field = DeformationField::new(height, width, data)?;
        let peak = field.max_magnitude();
        if peak == 0.0 {
            return Ok(field);
        }
        let target = self.max_displacement * rng.random_range(0.5..=1.0);
        // Shaved so that f32 rounding cannot push a vector past the bound.
        let field = field.scaled(target / peak * (1.0 - 1e-6)).quantized();
        debug_assert!(field.max_magnitude() <= self.max_displacement);
        Ok(field)
    }
}

/// Separable Gaussian blur with clamp-to-edge borders, truncated at 3σ.
fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return plane.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[i * w + clamp(j as isize + k as isize - radius, w)];
            }
            tmp[i * w + j] = acc / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[clamp(i as isize + k as isize - radius, h) * w + j];
            }
            out[i * w + j] = acc / norm;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alignment {
    Unpaired,
    Aligned,
    Misaligned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub split: Split,
    pub dark_path: String,
    pub stained_path: Option<String>,
    pub warp_path: Option<String>,
    pub alignment: Alignment,
    /// Corpus indices behind each side.
    pub dark_source: usize,
    pub stained_source: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub name: String,
    pub seed: u64,
    pub corpus_hash: String,
    pub size: usize,
    pub c_d_path: String,
}

/// Line-delimited JSON: a header line, then one line per record.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = serde_json::to_string(&self.header)?;
        out.push('\n');
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(StainError::Empty { what: "manifest" })?;
        let header = serde_json::from_str(header)?;
        let records = lines.map(serde_json::from_str).collect::<std::result::Result<_, _>>()?;
        let m = DatasetManifest { header, records };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(file_err(path))?;
        let mut text = String::new();
        for line in BufReader::new(file).lines() {
            text.push_str(&line.map_err(file_err(path))?);
            text.push('\n');
        }
        Self::from_jsonl(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(file_err(path))?;
        f.write_all(self.to_jsonl()?.as_bytes()).map_err(file_err(path))
    }

    /// Checks the record invariants: unpaired records never pair an image
    /// with its own source, misaligned records carry a warp, and the two
    /// sides of the unpaired training split draw on disjoint sources.
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(StainError::Format { what: "manifest", detail });
        for (i, r) in self.records.iter().enumerate() {
            match r.alignment {
                Alignment::Unpaired if r.stained_source == Some(r.dark_source) => {
                    return bad(format!("record {i} is unpaired but shares its source"));
                }
                Alignment::Misaligned if r.warp_path.is_none() => {
                    return bad(format!("record {i} is misaligned without a warp"));
                }
                Alignment::Aligned | Alignment::Misaligned if r.stained_path.is_none() => {
                    return bad(format!("record {i} is paired without a stained image"));
                }
                _ => {}
            }
        }
        let unpaired: Vec<_> = self.records.iter().filter(|r| r.alignment == Alignment::Unpaired).collect();
        let dark: std::collections::HashSet<_> = unpaired.iter().map(|r| r.dark_source).collect();
        if unpaired.iter().filter_map(|r| r.stained_source).any(|s| dark.contains(&s)) {
            return bad("dark and stained sides of the unpaired split overlap".into());
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }
}

/// A built dataset held in memory, ready to be written out.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub dark: Vec<RasterImage>,
    pub stained: Vec<Option<RasterImage>>,
    /// Generating warps: the stained partner warped by this field is the
    /// image the dark-field record was synthesized from.
    pub warps: Vec<Option<DeformationField>>,
    pub c_d: IlluminanceCdf,
    pub c_b: IlluminanceCdf,
}

impl Dataset {
    /// Writes images, warps, CDF tables and `manifest.jsonl` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        for (i, r) in self.manifest.records.iter().enumerate() {
            save_png(&self.dark[i], &dir.join(&r.dark_path))?;
            if let (Some(p), Some(img)) = (&r.stained_path, &self.stained[i]) {
                save_png(img, &dir.join(p))?;
            }
            if let (Some(p), Some(w)) = (&r.warp_path, &self.warps[i]) {
                let path = dir.join(p);
                if let Some(parent) = path.parent() {
                    std::fs::create_dir_all(parent).map_err(file_err(parent))?;
                }
                w.save(&path)?;
            }
        }
        self.c_d.save(&dir.join(&self.manifest.header.c_d_path))?;
        self.c_b.save(&dir.join("c_b.txt"))?;
        let path = dir.join("manifest.jsonl");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

fn check_corpus(corpus: &[RasterImage], needed: usize) -> Result<usize> {
    if corpus.len() < needed {
        return Err(StainError::InvalidInput(format!("corpus has {} images, {needed} needed", corpus.len())));
    }
    let size = corpus[0].height();
    if corpus.iter().any(|c| c.height() != size || c.width() != size || c.space() != ColorSpace::Rgb) {
        return Err(StainError::InvalidInput("corpus images must be square RGB of one size".into()));
    }
    Ok(size)
}

fn shuffled(len: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut stream(seed, SPLIT_STREAM));
    order
}

fn darkfield_of(y: &RasterImage, c_b: &IlluminanceCdf, c_d: &IlluminanceCdf) -> Result<RasterImage> {
    Ok(on_u8_grid(&synthesize_darkfield(y, c_b, c_d)?.gray_to_rgb()?))
}

fn paths(kind: &str, i: usize) -> String {
    format!("{kind}/{i:05}.png")
}

/// Unpaired training split plus an aligned test split. The training dark
/// images are synthesized from one corpus subset and the stained images are
/// taken from another, so no training pair shares a source. Needs
/// `2·n_train + n_test` images.
pub fn build_unpaired(
    corpus: &[RasterImage],
    c_d: &IlluminanceCdf,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Dataset> {
    let size = check_corpus(corpus, 2 * n_train + n_test)?;
    let order = shuffled(corpus.len(), seed);
    let (dark_src, rest) = order.split_at(n_train);
    let (stained_src, rest) = rest.split_at(n_train);
    let test_src = &rest[..n_test];
    let c_b = estimate_cdf(stained_src.iter().map(|&i| &corpus[i]))?;
    let mut ds = empty_dataset("unpaired", seed, corpus, size, c_d, c_b);
    for (i, (&a, &b)) in dark_src.iter().zip(stained_src).enumerate() {
        ds.manifest.records.push(ManifestRecord {
            split: Split::Train,
            dark_path: paths("train/dark", i),
            stained_path: Some(paths("train/stained", i)),
            warp_path: None,
            alignment: Alignment::Unpaired,
            dark_source: a,
            stained_source: Some(b),
        });
        ds.dark.push(darkfield_of(&corpus[a], &ds.c_b, c_d)?);
        ds.stained.push(Some(corpus[b].clone()));
        ds.warps.push(None);
    }
    for (i, &t) in test_src.iter().enumerate() {
        ds.manifest.records.push(ManifestRecord {
            split: Split::Test,
            dark_path: paths("test/dark", i),
            stained_path: Some(paths("test/stained", i)),
            warp_path: None,
            alignment: Alignment::Aligned,
            dark_source: t,
            stained_source: Some(t),
        });
        ds.dark.push(darkfield_of(&corpus[t], &ds.c_b, c_d)?);
        ds.stained.push(Some(corpus[t].clone()));
        ds.warps.push(None);
    }
    ds.manifest.validate()?;
    Ok(ds)
}

fn empty_dataset(
    name: &str,
    seed: u64,
    corpus: &[RasterImage],
    size: usize,
    c_d: &IlluminanceCdf,
    c_b: IlluminanceCdf,
) -> Dataset {
    Dataset {
        manifest: DatasetManifest {
            header: ManifestHeader {
                name: name.into(),
                seed,
                corpus_hash: corpus_hash(corpus),
                size,
                c_d_path: "c_d.txt".into(),
            },
            records: Vec::new(),
        },
        dark: Vec::new(),
        stained: Vec::new(),
        warps: Vec::new(),
        c_d: c_d.clone(),
        c_b,
    }
}

/// Paired-but-misaligned splits: each dark image is synthesized from its
/// stained partner after a fresh smooth warp. Test pairs use warps of at most
/// `test_warp` pixels. The stored warp is the generating field.
pub fn build_misaligned(
    corpus: &[RasterImage],
    c_d: &IlluminanceCdf,
    n_train: usize,
    n_test: usize,
    warp: SmoothWarp,
    test_warp: f64,
    seed: u64,
) -> Result<Dataset> {
    let size = check_corpus(corpus, n_train + n_test)?;
    let order = shuffled(corpus.len(), seed);
    let c_b = estimate_cdf(order[..n_train].iter().map(|&i| &corpus[i]))?;
    let mut ds = empty_dataset("misaligned", seed, corpus, size, c_d, c_b);
    let test = SmoothWarp { max_displacement: test_warp, ..warp };
    for (k, &src) in order[..n_train + n_test].iter().enumerate() {
        let (split, params, i) = if k < n_train { (Split::Train, warp, k) } else { (Split::Test, test, k - n_train) };
        let tag = if split == Split::Train { "train" } else { "test" };
        let field = params.sample(size, size, &mut stream(seed, WARP_STREAM + k as u64))?;
        let y = &corpus[src];
        let warped = resample_image(y, &field)?;
        ds.manifest.records.push(ManifestRecord {
            split,
            dark_path: paths(&format!("{tag}/dark"), i),
            stained_path: Some(paths(&format!("{tag}/stained"), i)),
            warp_path: Some(format!("{tag}/warp/{i:05}.skdw")),
            alignment: Alignment::Misaligned,
            dark_source: src,
            stained_source: Some(src),
        });
        ds.dark.push(darkfield_of(&warped, &ds.c_b, c_d)?);
        ds.stained.push(Some(y.clone()));
        ds.warps.push(Some(field));
    }
    ds.manifest.validate()?;
    Ok(ds)
}

/// A loaded batch in network range.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub z: Tensor,
    /// Stained images, present when every record has one.
    pub y: Option<Tensor>,
    /// Whether `y` corresponds pixel-for-pixel (up to a warp) to `x`.
    pub corresponding: bool,
}

#[derive(Clone, Debug)]
struct CachedRecord {
    x: RasterImage,
    z: RasterImage,
    y: Option<RasterImage>,
    warp: Option<DeformationField>,
}

/// Reads records from a dataset directory, computing `z` on first use.
#[derive(Debug)]
pub struct DataLoader {
    root: PathBuf,
    manifest: DatasetManifest,
    enhancer: LightEnhancer,
    cache: HashMap<usize, CachedRecord>,
}

impl DataLoader {
    pub fn new(root: &Path, manifest: DatasetManifest, enhancer: LightEnhancer) -> Self {
        DataLoader { root: root.to_path_buf(), manifest, enhancer, cache: HashMap::new() }
    }

    pub fn open(root: &Path, enhancer: LightEnhancer) -> Result<Self> {
        Ok(Self::new(root, DatasetManifest::load(&root.join("manifest.jsonl"))?, enhancer))
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn record(&mut self, index: usize) -> Result<&CachedRecord> {
        let r = self
            .manifest
            .records
            .get(index)
            .ok_or_else(|| StainError::InvalidInput(format!("record {index} not in manifest")))?
            .clone();
        if !self.cache.contains_key(&index) {
            let named = |e: StainError| StainError::InvalidInput(format!("record {index} ({}): {e}", r.dark_path));
            let x = load_png(&self.root.join(&r.dark_path), ColorSpace::Rgb).map_err(named)?;
            let y = r
                .stained_path
                .as_ref()
                .map(|p| load_png(&self.root.join(p), ColorSpace::Rgb))
                .transpose()
                .map_err(named)?;
            let warp = r.warp_path.as_ref().map(|p| DeformationField::load(&self.root.join(p))).transpose().map_err(named)?;
            let z = self.enhancer.apply(&x)?;
            self.cache.insert(index, CachedRecord { x, z, y, warp });
        }
        Ok(&self.cache[&index])
    }

    /// `(x, z, y, warp)` of one record as images.
    pub fn images(
        &mut self,
        index: usize,
    ) -> Result<(RasterImage, RasterImage, Option<RasterImage>, Option<DeformationField>)> {
        let r = self.record(index)?;
        Ok((r.x.clone(), r.z.clone(), r.y.clone(), r.warp.clone()))
    }

    pub fn load_batch(&mut self, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(StainError::Empty { what: "batch" });
        }
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        let mut ys = Vec::new();
        let mut corresponding = true;
        for &i in indices {
            corresponding &= self.manifest.records.get(i).is_some_and(|r| r.alignment != Alignment::Unpaired);
            let r = self.record(i)?;
            xs.push(r.x.clone());
            zs.push(r.z.clone());
            if let Some(y) = &r.y {
                ys.push(y.clone());
            }
        }
        let refs = |v: &[RasterImage]| -> Result<Tensor> { to_network(&v.iter().collect::<Vec<_>>()) };
        Ok(Batch {
            x: refs(&xs)?,
            z: refs(&zs)?,
            y: if ys.len() == xs.len() { Some(refs(&ys)?) } else { None },
            corresponding,
        })
    }
}
