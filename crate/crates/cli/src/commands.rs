use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use stainkd_core::align::{DeformationField, RegistrationNet};
use stainkd_core::checkpoint::{restore_student, restore_teacher, student_checkpoint, teacher_checkpoint, Checkpoint};
use stainkd_core::datagen::{
    build_misaligned, build_unpaired, load_corpus, DatasetManifest, ProceduralCorpus, SmoothWarp, Split,
};
use stainkd_core::enhance::{IlluminanceCdf, LightEnhancer};
use stainkd_core::image::{load_png, save_png, ColorSpace, RasterImage};
use stainkd_core::metrics::{frechet_distance, lpips_c, psnr, ssim, write_eval_csv, FeatureEmbedder, ImageScores, RandomConvEmbedder};
use stainkd_core::student::{infer as run_generator, StudentNets, StudentSpec};
use stainkd_core::teacher::{make_gray_pairs, train_colorizer_with, ColorizerSpec, ColorizerTraining, Teacher};
use stainkd_core::train::{lr_schedule, run_student, LoopConfig, StudentData, StudentOptimizers};

use crate::config::RunConfig;

const UNPAIRED_DIR: &str = "unpaired";
const MISALIGNED_DIR: &str = "misaligned";
const TEACHER_FILE: &str = "teacher.ckpt";

fn student_file(paired: bool) -> &'static str {
    if paired {
        "student_paired.ckpt"
    } else {
        "student_unpaired.ckpt"
    }
}

pub fn synth_data(cfg: &RunConfig) -> Result<()> {
    let d = &cfg.data;
    let needed = (2 * d.unpaired_train + d.unpaired_test).max(d.paired_train + d.paired_test);
    let corpus = match &cfg.paths.corpus {
        Some(dir) => load_corpus(dir, d.size)?,
        None => ProceduralCorpus { size: d.size, seed: cfg.seed }.generate(needed)?,
    };
    let c_d = IlluminanceCdf::darkfield(d.darkfield_kappa)?;
    let root = &cfg.paths.data;
    let unpaired = build_unpaired(&corpus, &c_d, d.unpaired_train, d.unpaired_test, cfg.seed)?;
    let m = unpaired.save(&root.join(UNPAIRED_DIR))?;
    eprintln!("wrote {} ({} records)", m.display(), unpaired.manifest.records.len());
    let warp = SmoothWarp { max_displacement: d.warp_max, spacing: d.warp_spacing };
    let paired = build_misaligned(&corpus, &c_d, d.paired_train, d.paired_test, warp, d.test_warp_max, cfg.seed)?;
    let m = paired.save(&root.join(MISALIGNED_DIR))?;
    eprintln!("wrote {} ({} records)", m.display(), paired.manifest.records.len());
    cfg.snapshot(root)
}

/// Images of one split: `(id, x, y, warp)`.
type Records = Vec<(String, RasterImage, Option<RasterImage>, Option<DeformationField>)>;

fn load_split(root: &Path, split: Split) -> Result<Records> {
    let manifest = DatasetManifest::load(&root.join("manifest.jsonl"))
        .with_context(|| format!("no dataset at {}; run synth-data first", root.display()))?;
    let mut out = Vec::new();
    for i in manifest.indices(split) {
        let r = &manifest.records[i];
        let ctx = || format!("record {i} ({})", r.dark_path);
        let x = load_png(&root.join(&r.dark_path), ColorSpace::Rgb).with_context(ctx)?;
        let y = r.stained_path.as_ref().map(|p| load_png(&root.join(p), ColorSpace::Rgb)).transpose().with_context(ctx)?;
        let w = r.warp_path.as_ref().map(|p| DeformationField::load(&root.join(p))).transpose().with_context(ctx)?;
        let id = Path::new(&r.dark_path).file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push((id, x, y, w));
    }
    if out.is_empty() {
        bail!("{} has no {split:?} records", root.display());
    }
    Ok(out)
}

pub fn train_teacher(cfg: &RunConfig) -> Result<()> {
    let t = &cfg.teacher;
    let records = load_split(&cfg.paths.data.join(UNPAIRED_DIR), Split::Train)?;
    let dark: Vec<&RasterImage> = records.iter().map(|r| &r.1).collect();
    let stained: Vec<RasterImage> = records.iter().filter_map(|r| r.2.clone()).collect();
    let enhancer = LightEnhancer::fit(dark, &stained, t.cdf_mode)?;
    let pairs = make_gray_pairs(&stained)?;
    let spec = ColorizerSpec { width: t.width, depth: t.depth };
    let training = ColorizerTraining { epochs: t.epochs, lr: t.lr, batch: t.batch, seed: cfg.seed };
    std::fs::create_dir_all(&cfg.paths.out)?;
    let log_path = cfg.paths.out.join("teacher_log.csv");
    let mut log = BufWriter::new(File::create(&log_path).with_context(|| log_path.display().to_string())?);
    writeln!(log, "epoch,loss")?;
    let mut io_err = None;
    let (colorizer, _) = train_colorizer_with(&pairs, spec, &training, |epoch, loss| {
        if let Err(e) = writeln!(log, "{epoch},{loss}") {
            io_err.get_or_insert(e);
        }
        eprintln!("teacher epoch {epoch}: loss {loss:.5}");
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    log.flush()?;
    let teacher = Teacher { enhancer, colorizer };
    let path = cfg.paths.checkpoint.join(TEACHER_FILE);
    teacher_checkpoint(&teacher)?.save(&path)?;
    eprintln!("wrote {}", path.display());
    cfg.snapshot(&cfg.paths.checkpoint)?;
    cfg.snapshot(&cfg.paths.out)
}

const LOG_HEADER: &str = "step,lr,l_adv,l_d,l_kd,l_cyc,l_con,l_smoo,l_adv_x,l_d_x,l_u,l_p";

/// Keeps the header and rows for steps before `start`, so a resumed run
/// continues the same log.
fn open_log(path: &Path, start: u64) -> Result<BufWriter<File>> {
    let mut kept = vec![LOG_HEADER.to_string()];
    if start > 0 && path.exists() {
        let f = File::open(path)?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line?;
            let step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if step < start {
                kept.push(line);
            }
        }
    }
    let mut w = BufWriter::new(File::create(path).with_context(|| path.display().to_string())?);
    for line in kept {
        writeln!(w, "{line}")?;
    }
    Ok(w)
}

pub fn train_student(cfg: &RunConfig, paired: bool, resume: Option<&Path>) -> Result<()> {
    let s = &cfg.student;
    let teacher_path = cfg.paths.checkpoint.join(TEACHER_FILE);
    let teacher = restore_teacher(
        &Checkpoint::load(&teacher_path).with_context(|| format!("{}; run train-teacher first", teacher_path.display()))?,
    )?;
    let dir = cfg.paths.data.join(if paired { MISALIGNED_DIR } else { UNPAIRED_DIR });
    let records = load_split(&dir, Split::Train)?;
    let dark: Vec<RasterImage> = records.iter().map(|r| r.1.clone()).collect();
    let stained: Vec<RasterImage> = records.iter().filter_map(|r| r.2.clone()).collect();
    let data = if paired {
        let warps: Vec<_> = records.iter().map(|r| r.3.clone()).collect();
        StudentData::paired(&dark, &stained, &warps, &teacher)?
    } else {
        StudentData::unpaired(&dark, &stained, &teacher)?
    };
    let spec = StudentSpec {
        generator_width: s.generator_width,
        discriminator_width: s.discriminator_width,
        symmetric: s.symmetric,
    };
    let reg = (s.registration_width, s.registration_depth);
    let (mut nets, mut r, mut opt, start) = match resume {
        Some(path) => {
            let st = restore_student(&Checkpoint::load(path)?)?;
            if st.r.is_some() != paired {
                bail!("{} is not a {} checkpoint", path.display(), if paired { "paired" } else { "unpaired" });
            }
            if st.spec != spec {
                bail!("checkpoint architecture {:?} differs from the configuration {spec:?}", st.spec);
            }
            eprintln!("resuming from step {}", st.step);
            (st.nets, st.r, st.opt, st.step)
        }
        None => {
            let nets = StudentNets::new(&spec, cfg.seed)?;
            let r = if paired { Some(RegistrationNet::new(reg.0, reg.1, cfg.seed.wrapping_add(10))?) } else { None };
            let opt = StudentOptimizers::new(&nets, r.as_ref());
            (nets, r, opt, 0)
        }
    };
    let steps_per_epoch = if s.steps_per_epoch == 0 { data.len().div_ceil(s.batch) } else { s.steps_per_epoch };
    let lc = LoopConfig {
        epochs: s.epochs,
        steps_per_epoch,
        batch: s.batch,
        crop: s.crop,
        lr: s.lr,
        seed: cfg.seed,
        weights: if paired { s.paired_weights } else { s.unpaired_weights },
        smoothness: s.smoothness,
    };
    std::fs::create_dir_all(&cfg.paths.out)?;
    cfg.snapshot(&cfg.paths.out)?;
    cfg.snapshot(&cfg.paths.checkpoint)?;
    let tag = if paired { "paired" } else { "unpaired" };
    let mut log = open_log(&cfg.paths.out.join(format!("train_{tag}_log.csv")), start)?;
    let ck_path = cfg.paths.checkpoint.join(student_file(paired));
    let total = lc.total_steps();
    let enhancer = &teacher.enhancer;
    let save = |nets: &StudentNets, r: Option<&RegistrationNet>, opt: &StudentOptimizers, done: u64| {
        student_checkpoint(&spec, enhancer, nets, r.map(|r| (r, reg.0, reg.1)), opt, done)?.save(&ck_path)
    };
    run_student(&data, &mut nets, r.as_mut(), &mut opt, &lc, start, |step, out, nets, r, opt| {
        let l = &out.report;
        let lr = lr_schedule(step, lc.epochs, lc.steps_per_epoch, lc.lr);
        writeln!(
            log,
            "{step},{lr},{},{},{},{},{},{},{},{},{},{}",
            l.l_adv, l.l_d, l.l_kd, l.l_cyc, l.l_con, l.l_smoo, l.l_adv_x, l.l_d_x, l.l_u, l.l_p
        )?;
        let done = step + 1;
        if done % 10 == 0 || done == total {
            eprintln!("step {done}/{total}: L_kd {:.4} L_cyc {:.4} L_adv {:.4} L_D {:.4}", l.l_kd, l.l_cyc, l.l_adv, l.l_d);
        }
        if cfg.student.checkpoint_every > 0 && done % cfg.student.checkpoint_every == 0 {
            log.flush()?;
            save(nets, r, opt, done)?;
            // Numbered copies keep every resume point, not just the latest.
            std::fs::copy(&ck_path, ck_path.with_extension(format!("step{done}.ckpt")))?;
        }
        Ok(())
    })?;
    log.flush()?;
    save(&nets, r.as_ref(), &opt, total)?;
    eprintln!("wrote {}", ck_path.display());
    Ok(())
}

fn default_checkpoint(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.checkpoint.join(student_file(false)))
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(input)
        .with_context(|| input.display().to_string())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no PNG files in {}", input.display());
    }
    Ok(paths)
}

pub fn infer(cfg: &RunConfig, checkpoint: Option<&Path>, input: Option<&Path>) -> Result<()> {
    let ck = default_checkpoint(cfg, checkpoint);
    let st = restore_student(&Checkpoint::load(&ck).with_context(|| ck.display().to_string())?)?;
    let inputs: Vec<(String, RasterImage)> = match input {
        Some(p) => png_inputs(p)?
            .into_iter()
            .map(|p| {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                Ok((id, load_png(&p, ColorSpace::Rgb)?))
            })
            .collect::<Result<_>>()?,
        None => load_split(&cfg.paths.data.join(UNPAIRED_DIR), Split::Test)?.into_iter().map(|r| (r.0, r.1)).collect(),
    };
    let dir = cfg.paths.out.join("infer");
    std::fs::create_dir_all(&dir)?;
    for (id, x) in &inputs {
        let y = run_generator(x, &st.enhancer, &st.nets.g)?;
        save_png(&y, &dir.join(format!("{id}.png")))?;
    }
    eprintln!("wrote {} images to {}", inputs.len(), dir.display());
    cfg.snapshot(&dir)
}

pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<()> {
    let ck = default_checkpoint(cfg, checkpoint);
    let st = restore_student(&Checkpoint::load(&ck).with_context(|| ck.display().to_string())?)?;
    let records = load_split(&cfg.paths.data.join(UNPAIRED_DIR), Split::Test)?;
    let embedder = RandomConvEmbedder::new(cfg.eval.embedder_seed);
    let mut rows = Vec::new();
    let (mut preds, mut refs) = (Vec::new(), Vec::new());
    for (id, x, y, _) in records {
        let Some(y) = y else { bail!("test record {id} has no stained reference") };
        let y_hat = run_generator(&x, &st.enhancer, &st.nets.g)?;
        let z = st.enhancer.apply(&x)?;
        rows.push(ImageScores {
            image_id: id,
            psnr: psnr(&y_hat, &y, y.range().width())?,
            ssim: ssim(&y_hat, &y)?,
            lpips_c: lpips_c(&y_hat, &z, &embedder)?,
        });
        preds.push(y_hat);
        refs.push(y);
    }
    let frechet = frechet_distance(&preds, &refs, &embedder)?;
    std::fs::create_dir_all(&cfg.paths.out)?;
    let path = cfg.paths.out.join("eval.csv");
    let mut f = BufWriter::new(File::create(&path).with_context(|| path.display().to_string())?);
    write_eval_csv(&mut f, &rows, frechet, &embedder.tag())?;
    f.flush()?;
    let n = rows.len() as f64;
    eprintln!(
        "mean PSNR {:.3} dB, SSIM {:.4}, LPIPS-c {:.4}, Frechet {:.4} over {} images; wrote {}",
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        rows.iter().map(|r| r.lpips_c).sum::<f64>() / n,
        frechet,
        rows.len(),
        path.display()
    );
    cfg.snapshot(&cfg.paths.out)
}
