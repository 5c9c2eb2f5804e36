//! Illuminance CDFs and the histogram-matching light-enhancement operator.
//!
//! Dark-field and stained illuminance distributions are roughly mirror images
//! of each other, so an enhanced pixel is `c_b⁻¹(1 − c_d(x))` and a synthetic
//! dark-field pixel is `c_d⁻¹(1 − c_b(gray(y)))`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{file_err, Result, StainError};
use crate::image::{luminance_of, RasterImage};

pub const BINS: usize = 256;

/// Population used to turn an analytic CDF into integer bin counts.
const ANALYTIC_POPULATION: u64 = 1 << 40;

/// Uniform share mixed into the dark-field CDF so that no bin is empty.
const DARKFIELD_FLOOR: f64 = 1e-4;

/// Default shape of the synthetic dark-field CDF `1 − (1 − v)^κ`.
pub const DARKFIELD_KAPPA: f64 = 6.0;

/// Bin of an intensity in `[0, 1]`: nearest of the 256 centres `i / 255`.
pub fn bin_of(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as usize
}

pub fn bin_center(i: usize) -> f64 {
    i as f64 / 255.0
}

/// Cumulative distribution of grey intensity over 256 uniform bins.
#[derive(Clone, Debug, PartialEq)]
pub struct IlluminanceCdf {
    cdf: Vec<f64>,
    source_count: u64,
}

impl IlluminanceCdf {
    /// Builds the CDF from per-bin pixel counts. Dividing integer prefix sums
    /// by the total makes the last entry exactly one.
    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        if counts.len() != BINS {
            return Err(StainError::Shape(format!("{} histogram bins, expected {BINS}", counts.len())));
        }
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(StainError::Empty { what: "illuminance histogram" });
        }
        let mut running = 0u64;
        let cdf = counts
            .iter()
            .map(|&c| {
                running += c;
                running as f64 / total as f64
            })
            .collect();
        Ok(IlluminanceCdf { cdf, source_count: total })
    }

    /// Validates a ready-made table.
    pub fn from_values(cdf: Vec<f64>, source_count: u64) -> Result<Self> {
        if cdf.len() != BINS {
            return Err(StainError::Shape(format!("{} cdf entries, expected {BINS}", cdf.len())));
        }
        if source_count == 0 {
            return Err(StainError::Empty { what: "illuminance histogram" });
        }
        if cdf.iter().any(|v| !(0.0..=1.0).contains(v)) || cdf.windows(2).any(|w| w[1] < w[0]) {
            return Err(StainError::InvalidInput("cdf must be non-decreasing within [0, 1]".into()));
        }
        if cdf[BINS - 1] != 1.0 {
            return Err(StainError::InvalidInput(format!("cdf ends at {}, not 1", cdf[BINS - 1])));
        }
        Ok(IlluminanceCdf { cdf, source_count })
    }

    /// Discretizes a continuous CDF `f` on `[0, 1]` with `f(1) = 1`, giving
    /// each bin the mass between its edges.
    pub fn from_analytic(f: impl Fn(f64) -> f64) -> Result<Self> {
        let n = ANALYTIC_POPULATION as f64;
        let mut counts = vec![0u64; BINS];
        let mut prev = 0u64;
        for (i, slot) in counts.iter_mut().enumerate() {
            let edge = ((i as f64 + 0.5) / 255.0).min(1.0);
            let upto = if i == BINS - 1 { ANALYTIC_POPULATION } else { (f(edge).clamp(0.0, 1.0) * n).round() as u64 };
            let upto = upto.max(prev);
            *slot = upto - prev;
            prev = upto;
        }
        Self::from_counts(&counts)
    }

    /// Left-skewed dark-field CDF `1 − (1 − v)^κ`: most mass sits near black.
    /// A small uniform share keeps the table strictly increasing.
    pub fn darkfield(kappa: f64) -> Result<Self> {
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(StainError::InvalidInput(format!("dark-field shape {kappa} must be positive")));
        }
        Self::from_analytic(|v| (1.0 - DARKFIELD_FLOOR) * (1.0 - (1.0 - v).powf(kappa)) + DARKFIELD_FLOOR * v)
    }

    pub fn values(&self) -> &[f64] {
        &self.cdf
    }

    pub fn source_count(&self) -> u64 {
        self.source_count
    }

    /// `cdf` evaluated at the bin containing `v`.
    pub fn at(&self, v: f64) -> f64 {
        self.cdf[bin_of(v)]
    }

    /// Generalized inverse: the smallest bin centre whose cdf reaches `p`.
    ///
    /// Bins without mass are skipped, so `p = 0` gives the darkest populated
    /// bin rather than bin 0.
    pub fn inverse_lookup(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let first = self.cdf.partition_point(|&c| c <= 0.0);
        let i = first + self.cdf[first..].partition_point(|&c| c < p);
        bin_center(i.min(BINS - 1))
    }

    /// Plain-text table: a `# source_count=N` line, then `bin_center cdf` per bin.
    pub fn to_table(&self) -> String {
        let mut out = format!("# source_count={}\n", self.source_count);
        for (i, c) in self.cdf.iter().enumerate() {
            writeln!(out, "{:?} {:?}", bin_center(i), c).expect("string write");
        }
        out
    }

    pub fn from_table(text: &str) -> Result<Self> {
        let bad = |detail: String| StainError::Format { what: "cdf table", detail };
        let mut source_count = None;
        let mut cdf = Vec::with_capacity(BINS);
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("source_count=") {
                    source_count = Some(v.parse::<u64>().map_err(|e| bad(format!("line {}: {e}", n + 1)))?);
                }
                continue;
            }
            let mut cols = line.split_whitespace();
            let (Some(center), Some(value), None) = (cols.next(), cols.next(), cols.next()) else {
                return Err(bad(format!("line {}: expected two columns", n + 1)));
            };
            let center: f64 = center.parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?;
            if (center - bin_center(cdf.len())).abs() > 1e-9 {
                return Err(bad(format!("line {}: unexpected bin centre {center}", n + 1)));
            }
            cdf.push(value.parse().map_err(|e| bad(format!("line {}: {e}", n + 1)))?);
        }
        Self::from_values(cdf, source_count.ok_or_else(|| bad("missing source_count".into()))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_table()).map_err(file_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_table(&std::fs::read_to_string(path).map_err(file_err(path))?)
    }
}

/// Pooled CDF of every pixel in `images`; RGB images are converted to grey.
pub fn estimate_cdf<'a>(images: impl IntoIterator<Item = &'a RasterImage>) -> Result<IlluminanceCdf> {
    let mut counts = vec![0u64; BINS];
    let mut seen = 0usize;
    for img in images {
        seen += 1;
        for &v in luminance_of(img)?.data() {
            counts[bin_of(v)] += 1;
        }
    }
    if seen == 0 {
        return Err(StainError::Empty { what: "image list" });
    }
    IlluminanceCdf::from_counts(&counts)
}

/// `z = H(x)`: per pixel, `c_b⁻¹(1 − c_d(x))`.
pub fn enhance(x: &RasterImage, c_d: &IlluminanceCdf, c_b: &IlluminanceCdf) -> Result<RasterImage> {
    remap(x, c_d, c_b)
}

/// Reverse direction used to fabricate dark-field inputs from stained images.
pub fn synthesize_darkfield(y: &RasterImage, c_b: &IlluminanceCdf, c_d: &IlluminanceCdf) -> Result<RasterImage> {
    remap(y, c_b, c_d)
}

fn remap(img: &RasterImage, from: &IlluminanceCdf, to: &IlluminanceCdf) -> Result<RasterImage> {
    let gray = luminance_of(img)?;
    // Only 256 distinct inputs exist, so tabulate once.
    let table: Vec<f64> = (0..BINS).map(|i| to.inverse_lookup(1.0 - from.values()[i])).collect();
    let data = gray.data().iter().map(|&v| table[bin_of(v)]).collect();
    RasterImage::gray(gray.height(), gray.width(), data)
}

/// Where the dark-field CDF comes from when enhancing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CdfMode {
    /// Pooled over the training corpus; fixed at inference.
    #[default]
    Corpus,
    /// Re-estimated from each input image.
    PerImage,
}

/// The operator `H` with its two CDF tables.
#[derive(Clone, Debug, PartialEq)]
pub struct LightEnhancer {
    pub c_d: IlluminanceCdf,
    pub c_b: IlluminanceCdf,
    pub mode: CdfMode,
}

impl LightEnhancer {
    pub fn new(c_d: IlluminanceCdf, c_b: IlluminanceCdf, mode: CdfMode) -> Self {
        LightEnhancer { c_d, c_b, mode }
    }

    pub fn fit<'a>(
        dark: impl IntoIterator<Item = &'a RasterImage>,
        stained: impl IntoIterator<Item = &'a RasterImage>,
        mode: CdfMode,
    ) -> Result<Self> {
        Ok(LightEnhancer { c_d: estimate_cdf(dark)?, c_b: estimate_cdf(stained)?, mode })
    }

    pub fn apply(&self, x: &RasterImage) -> Result<RasterImage> {
        match self.mode {
            CdfMode::Corpus => enhance(x, &self.c_d, &self.c_b),
            CdfMode::PerImage => enhance(x, &estimate_cdf([x])?, &self.c_b),
        }
    }

    /// Writes `c_d.txt` and `c_b.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(file_err(dir))?;
        self.c_d.save(&dir.join("c_d.txt"))?;
        self.c_b.save(&dir.join("c_b.txt"))
    }

    pub fn load(dir: &Path, mode: CdfMode) -> Result<Self> {
        Ok(LightEnhancer {
            c_d: IlluminanceCdf::load(&dir.join("c_d.txt"))?,
            c_b: IlluminanceCdf::load(&dir.join("c_b.txt"))?,
            mode,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gray(h: usize, w: usize, data: Vec<f64>) -> RasterImage {
        RasterImage::gray(h, w, data).unwrap()
    }

    /// Empirical CDF by sorting: fraction of pixels at or below each centre.
    fn sorted_oracle(pixels: &[f64]) -> Vec<f64> {
        let mut quantized: Vec<usize> = pixels.iter().map(|&v| (v * 255.0).round() as usize).collect();
        quantized.sort_unstable();
        (0..BINS)
            .map(|i| quantized.iter().take_while(|&&q| q <= i).count() as f64 / quantized.len() as f64)
            .collect()
    }

    #[test]
    fn uniform_half_image_is_a_point_mass() {
        let cdf = estimate_cdf([&gray(4, 4, vec![0.5; 16])]).unwrap();
        let b = bin_of(0.5);
        assert!(cdf.values()[..b].iter().all(|&c| c == 0.0));
        assert!(cdf.values()[b..].iter().all(|&c| c == 1.0));
        assert_eq!(cdf.source_count(), 16);
    }

    #[test]
    fn two_point_masses() {
        let cdf = estimate_cdf([&gray(2, 2, vec![0.0, 1.0, 0.0, 1.0])]).unwrap();
        assert_eq!(cdf.values()[0], 0.5);
        assert_eq!(cdf.values()[254], 0.5);
        assert_eq!(cdf.values()[255], 1.0);
    }

    #[test]
    fn ramp_matches_sorted_oracle() {
        let data: Vec<f64> = (0..16).map(|i| i as f64 / 15.0).collect();
        let cdf = estimate_cdf([&gray(4, 4, data.clone())]).unwrap();
        assert_eq!(cdf.values(), sorted_oracle(&data).as_slice());
    }

    #[test]
    fn empty_list_is_an_error() {
        assert!(matches!(estimate_cdf(std::iter::empty()), Err(StainError::Empty { .. })));
    }

    #[test]
    fn rgb_input_is_converted_first() {
        let rgb = RasterImage::rgb(1, 1, vec![1.0, 0.0, 0.0]).unwrap();
        let cdf = estimate_cdf([&rgb]).unwrap();
        assert_eq!(cdf.values()[bin_of(0.299) - 1], 0.0);
        assert_eq!(cdf.values()[bin_of(0.299)], 1.0);
    }

    #[test]
    fn inverse_lookup_conventions() {
        let cdf = estimate_cdf([&gray(1, 2, vec![0.2, 0.8])]).unwrap();
        assert_eq!(cdf.inverse_lookup(0.0), bin_center(bin_of(0.2)));
        assert_eq!(cdf.inverse_lookup(0.5), bin_center(bin_of(0.2)));
        assert_eq!(cdf.inverse_lookup(0.51), bin_center(bin_of(0.8)));
        assert_eq!(cdf.inverse_lookup(1.0), bin_center(bin_of(0.8)));

        let uniform = IlluminanceCdf::from_counts(&[1; BINS]).unwrap();
        // cdf[i] = (i + 1) / 256 reaches one half at i = 127, centre 127/255.
        assert_eq!(uniform.inverse_lookup(0.5), 127.0 / 255.0);
        assert!((uniform.inverse_lookup(0.5) - 0.5).abs() <= 0.5 / 255.0);
    }

    #[test]
    fn enhance_reverses_the_extremes() {
        let x = gray(1, 3, vec![0.1, 0.4, 0.9]);
        let stained = gray(1, 3, vec![0.3, 0.6, 0.95]);
        let c_d = estimate_cdf([&x]).unwrap();
        let c_b = estimate_cdf([&stained]).unwrap();
        let z = enhance(&x, &c_d, &c_b).unwrap();
        assert_eq!(z.data()[2], c_b.inverse_lookup(0.0));
        assert_eq!(z.data()[2], bin_center(bin_of(0.3)));
        assert_eq!(z.data()[0], bin_center(bin_of(0.95)));
    }

    #[test]
    fn white_background_becomes_near_black() {
        let y = RasterImage::rgb(1, 2, vec![1.0, 1.0, 1.0, 0.4, 0.2, 0.5]).unwrap();
        let c_b = estimate_cdf([&y]).unwrap();
        let c_d = IlluminanceCdf::darkfield(DARKFIELD_KAPPA).unwrap();
        let x = synthesize_darkfield(&y, &c_b, &c_d).unwrap();
        assert_eq!(x.data()[0], 0.0);
        assert!(x.data()[1] > x.data()[0]);
    }

    #[test]
    fn analytic_darkfield_cdf_is_valid_and_skewed() {
        let cdf = IlluminanceCdf::darkfield(DARKFIELD_KAPPA).unwrap();
        assert_eq!(cdf.values()[BINS - 1], 1.0);
        assert!(cdf.values()[0] > 0.0);
        assert!(cdf.values().windows(2).all(|w| w[1] > w[0]));
        assert!(cdf.at(0.25) > 0.8);
    }

    #[test]
    fn table_round_trip() {
        let cdf = IlluminanceCdf::darkfield(3.5).unwrap();
        let back = IlluminanceCdf::from_table(&cdf.to_table()).unwrap();
        assert_eq!(back, cdf);
        assert_eq!(cdf.to_table().lines().filter(|l| !l.starts_with('#')).count(), BINS);
    }

    #[test]
    fn malformed_tables_are_rejected() {
        assert!(IlluminanceCdf::from_table("0.0 1.0\n").is_err());
        let mut bad = IlluminanceCdf::darkfield(2.0).unwrap().to_table();
        bad = bad.replacen("0.0 ", "0.0 0.9 ", 1);
        assert!(IlluminanceCdf::from_table(&bad).is_err());
        assert!(IlluminanceCdf::from_values(vec![0.5; BINS], 1).is_err());
    }

    #[test]
    fn per_image_mode_uses_the_input_histogram() {
        let x = gray(1, 2, vec![0.0, 0.5]);
        let c_b = estimate_cdf([&gray(1, 2, vec![0.2, 0.7])]).unwrap();
        let c_d = IlluminanceCdf::darkfield(6.0).unwrap();
        let per = LightEnhancer::new(c_d.clone(), c_b.clone(), CdfMode::PerImage).apply(&x).unwrap();
        let own = enhance(&x, &estimate_cdf([&x]).unwrap(), &c_b).unwrap();
        assert_eq!(per, own);
    }

    proptest! {
        #[test]
        fn estimate_matches_sort_oracle(seed in 0u64..500, n in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let cdf = estimate_cdf([&gray(1, n, data.clone())]).unwrap();
            let oracle = sorted_oracle(&data);
            prop_assert_eq!(cdf.values(), oracle.as_slice());
        }

        #[test]
        fn enhance_is_antitone(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = gray(4, 4, (0..16).map(|_| rng.random::<f64>()).collect());
            let c_d = estimate_cdf([&x]).unwrap();
            let c_b = IlluminanceCdf::from_counts(&(0..BINS).map(|_| rng.random_range(0..5u64)).collect::<Vec<_>>()).unwrap();
            let z = enhance(&x, &c_d, &c_b).unwrap();
            for i in 0..16 {
                for j in 0..16 {
                    if c_d.at(x.data()[i]) < c_d.at(x.data()[j]) {
                        prop_assert!(z.data()[i] >= z.data()[j]);
                    }
                }
            }
        }
    }
}
