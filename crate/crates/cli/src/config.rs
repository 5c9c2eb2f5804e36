//! Run configuration: preset defaults, then the TOML file, then
//! `--override key=value`, then the dedicated flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use stainkd_core::align::SmoothnessNorm;
use stainkd_core::enhance::CdfMode;
use stainkd_core::student::LossWeights;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Dataset root; holds `unpaired/` and `misaligned/`.
    pub data: PathBuf,
    pub checkpoint: PathBuf,
    pub out: PathBuf,
    /// Directory of stained PNGs to use instead of the procedural corpus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    pub unpaired_train: usize,
    pub unpaired_test: usize,
    pub paired_train: usize,
    pub paired_test: usize,
    pub warp_max: f64,
    pub warp_spacing: usize,
    pub test_warp_max: f64,
    pub darkfield_kappa: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherConfig {
    pub width: usize,
    pub depth: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub cdf_mode: CdfMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudentConfig {
    pub generator_width: usize,
    pub discriminator_width: usize,
    pub symmetric: bool,
    pub registration_width: usize,
    pub registration_depth: usize,
    pub epochs: usize,
    /// Zero means one pass over the training records per epoch.
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub unpaired_weights: LossWeights,
    pub paired_weights: LossWeights,
    pub smoothness: SmoothnessNorm,
    pub checkpoint_every: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub embedder_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub teacher: TeacherConfig,
    pub student: StudentConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let paths = Paths {
            data: "runs/data".into(),
            checkpoint: "runs/checkpoints".into(),
            out: "runs/out".into(),
            corpus: None,
        };
        match preset {
            Preset::Desk => RunConfig {
                preset,
                seed: 1,
                paths,
                data: DataConfig {
                    size: 64,
                    unpaired_train: 32,
                    unpaired_test: 8,
                    paired_train: 32,
                    paired_test: 8,
                    warp_max: 8.0,
                    warp_spacing: 16,
                    test_warp_max: 1.0,
                    darkfield_kappa: 6.0,
                },
                teacher: TeacherConfig { width: 8, depth: 3, epochs: 20, lr: 1e-3, batch: 4, cdf_mode: CdfMode::Corpus },
                student: StudentConfig {
                    generator_width: 12,
                    discriminator_width: 16,
                    symmetric: false,
                    registration_width: 8,
                    registration_depth: 3,
                    epochs: 300,
                    steps_per_epoch: 1,
                    batch: 4,
                    crop: 64,
                    lr: 2e-4,
                    unpaired_weights: LossWeights::UNPAIRED,
                    paired_weights: LossWeights::PAIRED,
                    smoothness: SmoothnessNorm::Unsquared,
                    checkpoint_every: 100,
                },
                eval: EvalConfig { embedder_seed: 0 },
            },
            Preset::Paper => RunConfig {
                preset,
                seed: 1,
                paths,
                data: DataConfig {
                    size: 256,
                    unpaired_train: 559,
                    unpaired_test: 40,
                    paired_train: 401,
                    paired_test: 30,
                    warp_max: 8.0,
                    warp_spacing: 32,
                    test_warp_max: 1.0,
                    darkfield_kappa: 6.0,
                },
                teacher: TeacherConfig { width: 64, depth: 4, epochs: 100, lr: 1e-4, batch: 1, cdf_mode: CdfMode::Corpus },
                student: StudentConfig {
                    generator_width: 64,
                    discriminator_width: 64,
                    symmetric: false,
                    registration_width: 32,
                    registration_depth: 4,
                    epochs: 300,
                    steps_per_epoch: 0,
                    batch: 1,
                    crop: 256,
                    lr: 1e-4,
                    unpaired_weights: LossWeights::UNPAIRED,
                    paired_weights: LossWeights::PAIRED,
                    smoothness: SmoothnessNorm::Unsquared,
                    checkpoint_every: 500,
                },
                eval: EvalConfig { embedder_seed: 0 },
            },
        }
    }

    /// Field-level sanity checks, plus the values the paper preset pins.
    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.data;
        let s = &self.student;
        let t = &self.teacher;
        let positive = [
            ("data.size", d.size),
            ("data.unpaired_train", d.unpaired_train),
            ("data.paired_train", d.paired_train),
            ("data.warp_spacing", d.warp_spacing),
            ("teacher.width", t.width),
            ("teacher.depth", t.depth),
            ("teacher.batch", t.batch),
            ("student.generator_width", s.generator_width),
            ("student.discriminator_width", s.discriminator_width),
            ("student.registration_width", s.registration_width),
            ("student.registration_depth", s.registration_depth),
            ("student.epochs", s.epochs),
            ("student.batch", s.batch),
        ];
        for (field, v) in positive {
            if v == 0 {
                bail!("{field} must be positive");
            }
        }
        if s.crop < 32 || !s.crop.is_multiple_of(8) || s.crop > d.size {
            bail!("student.crop must be a multiple of 8 between 32 and data.size ({}), got {}", d.size, s.crop);
        }
        for (field, v) in [("student.lr", s.lr), ("teacher.lr", t.lr)] {
            if !(v > 0.0 && v.is_finite()) {
                bail!("{field} must be a positive number, got {v}");
            }
        }
        for (field, v) in [("data.warp_max", d.warp_max), ("data.test_warp_max", d.test_warp_max)] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!("{field} must be non-negative, got {v}");
            }
        }
        if !(d.darkfield_kappa > 0.0 && d.darkfield_kappa.is_finite()) {
            bail!("data.darkfield_kappa must be positive");
        }
        s.unpaired_weights.validate().context("student.unpaired_weights")?;
        s.paired_weights.validate().context("student.paired_weights")?;
        if self.preset == Preset::Paper {
            let pinned = [
                ("student.epochs", s.epochs == 300),
                ("student.lr", s.lr == 1e-4),
                ("student.unpaired_weights", s.unpaired_weights == LossWeights::UNPAIRED),
                ("student.paired_weights", s.paired_weights == LossWeights::PAIRED),
            ];
            for (field, ok) in pinned {
                if !ok {
                    bail!("{field} is pinned by the paper preset; use --preset desk to change it");
                }
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Writes `resolved_config.toml` into `dir`.
    pub fn snapshot(&self, dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?).with_context(|| format!("writing {}", path.display()))
    }
}

/// Everything that shapes the resolved configuration.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub file: Option<PathBuf>,
    pub preset: Option<Preset>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

pub fn resolve(src: &Sources) -> anyhow::Result<RunConfig> {
    let file: Option<toml::Table> = match &src.file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            Some(toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
        }
        None => None,
    };
    let preset = match (src.preset, file.as_ref().and_then(|f| f.get("preset"))) {
        (Some(p), _) => p,
        (None, Some(v)) => Preset::deserialize(v.clone()).context("preset")?,
        (None, None) => Preset::Desk,
    };
    let mut table = toml::Table::try_from(RunConfig::preset(preset))?;
    if let Some(f) = file {
        merge(&mut table, f);
    }
    table.insert("preset".into(), toml::Value::try_from(preset)?);
    for o in &src.overrides {
        apply_override(&mut table, o)?;
    }
    if let Some(seed) = src.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    if let Some(out) = &src.out {
        set_path(&mut table, "paths.out", toml::Value::String(out.display().to_string()))?;
    }
    let cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid configuration")?;
    cfg.validate()?;
    Ok(cfg)
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `key.path=value`; the value is read as TOML and falls back to a string.
fn apply_override(table: &mut toml::Table, text: &str) -> anyhow::Result<()> {
    let Some((key, raw)) = text.split_once('=') else {
        bail!("override `{text}` is not of the form key=value");
    };
    let key = key.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    set_path(table, key, value)
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> anyhow::Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|p| !p.is_empty()).with_context(|| format!("empty override key `{key}`"))?;
    let mut cur = table;
    for p in parts {
        cur = match cur.get_mut(p) {
            Some(toml::Value::Table(t)) => t,
            _ => bail!("unknown configuration section `{p}` in `{key}`"),
        };
    }
    if !cur.contains_key(last) && last != "corpus" {
        bail!("unknown configuration field `{key}`");
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
