//! Alternating GAN updates, batch sampling, the learning-rate schedule and
//! the student training loop shared by the unpaired and paired settings.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stainkd_nn::{Adam, AdamConfig, Precision, Tape, Tensor};

use crate::align::{
    loss_con, loss_smoo, paired_objective, paired_total, resample, DeformationField, PairedTerms,
    RegistrationNet, SmoothnessNorm,
};
use crate::error::{Result, StainError};
use crate::image::{to_network, RasterImage};
use crate::nets::Network;
use crate::student::{
    loss_kd, lsgan_discriminator, lsgan_generator, unpaired_objective, unpaired_total, LossReport,
    LossWeights, StudentNets,
};
use crate::teacher::Teacher;

/// One batch in network range: `x` `[N,3,H,W]`, `z` `[N,1,H,W]`, the
/// stained images `y` `[N,3,H,W]` and the teacher's `y_t` `[N,3,H,W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StudentBatch {
    pub x: Tensor,
    pub z: Tensor,
    pub y: Tensor,
    pub y_t: Tensor,
}

/// Adam state for every trained network.
#[derive(Clone, Debug)]
pub struct StudentOptimizers {
    pub g: Adam,
    pub f: Adam,
    pub d: Adam,
    pub d_x: Option<Adam>,
    pub r: Option<Adam>,
}

impl StudentOptimizers {
    pub fn new(nets: &StudentNets, r: Option<&RegistrationNet>) -> Self {
        let cfg = AdamConfig::default();
        StudentOptimizers {
            g: Adam::new(nets.g.params(), cfg),
            f: Adam::new(nets.f.params(), cfg),
            d: Adam::new(nets.d.params(), cfg),
            d_x: nets.d_x.as_ref().map(|d| Adam::new(d.params(), cfg)),
            r: r.map(|r| Adam::new(r.params(), cfg)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub lr: f64,
    pub precision: Precision,
    pub smoothness: SmoothnessNorm,
}

/// What a step produced besides the losses.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub report: LossReport,
    pub y_hat: Tensor,
    /// `φ` and `ŷ′` in the paired setting.
    pub phi: Option<Tensor>,
    pub warped: Option<Tensor>,
}

fn non_finite(step: u64, what: &str, value: f64) -> StainError {
    StainError::NonFinite { step, detail: format!("{what} = {value}") }
}

/// One alternating update in the unpaired setting: `D` minimizes `L_D`
/// against a detached `ŷ`, then `G` and `F` minimize `L_U` through the
/// updated, frozen `D`.
pub fn train_step_unpaired(
    step: u64,
    batch: &StudentBatch,
    nets: &mut StudentNets,
    opt: &mut StudentOptimizers,
    o: &StepOptions,
) -> Result<StepOutput> {
    alternating_step(step, batch, nets, None, opt, o)
}

/// One alternating update in the paired-but-misaligned setting: the `D`
/// update as in [`train_step_unpaired`], then `G`, `F` and `R` jointly
/// minimize `L_P`. `L_con` reaches `G` through `ŷ` and `R` through `φ`.
pub fn train_step_paired(
    step: u64,
    batch: &StudentBatch,
    nets: &mut StudentNets,
    r: &mut RegistrationNet,
    opt: &mut StudentOptimizers,
    o: &StepOptions,
) -> Result<StepOutput> {
    alternating_step(step, batch, nets, Some(r), opt, o)
}

fn alternating_step(
    step: u64,
    batch: &StudentBatch,
    nets: &mut StudentNets,
    r: Option<&mut RegistrationNet>,
    opt: &mut StudentOptimizers,
    o: &StepOptions,
) -> Result<StepOutput> {
    o.weights.validate()?;
    if r.is_some() && opt.r.is_none() {
        return Err(StainError::InvalidInput("paired step without a registration optimizer".into()));
    }
    let tape = Tape::new(o.precision);
    let x = tape.constant(batch.x.clone());
    let z = tape.constant(batch.z.clone());
    let y = tape.constant(batch.y.clone());
    let y_t = tape.constant(batch.y_t.clone());
    let pg = tape.bind(nets.g.params(), true);
    let y_hat = nets.g.forward(&pg, tape.cat_channels(&[x, z]));

    let l_d = {
        let pd = tape.bind(nets.d.params(), true);
        let fake = nets.d.score(&pd, y_hat.detach());
        let real = nets.d.score(&pd, y);
        let loss = lsgan_discriminator(real, fake);
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(non_finite(step, "L_D", value));
        }
        let grads = tape.backward(loss).for_params(nets.d.params());
        opt.d.step(nets.d.params_mut(), &grads, o.lr);
        value
    };

    let pd = tape.bind(nets.d.params(), false);
    let adv = lsgan_generator(nets.d.score(&pd, y_hat));
    let kd = loss_kd(y_hat, y_t);
    let pf = tape.bind(nets.f.params(), true);
    let x_back = nets.f.forward(&pf, y_hat);
    let cyc = x_back.l1_to(x);
    let mut objective = unpaired_objective(adv, kd, cyc, &o.weights);
    let mut report = LossReport {
        l_adv: adv.value().item(),
        l_d,
        l_kd: kd.value().item(),
        l_cyc: cyc.value().item(),
        ..Default::default()
    };
    report.l_u = unpaired_total(report.l_adv, report.l_kd, report.l_cyc, &o.weights);

    if let (Some(d_x), Some(opt_dx)) = (nets.d_x.as_mut(), opt.d_x.as_mut()) {
        let value = {
            let p = tape.bind(d_x.params(), true);
            let loss = lsgan_discriminator(d_x.score(&p, x), d_x.score(&p, x_back.detach()));
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(non_finite(step, "L_D_X", value));
            }
            let grads = tape.backward(loss).for_params(d_x.params());
            opt_dx.step(d_x.params_mut(), &grads, o.lr);
            value
        };
        let p = tape.bind(d_x.params(), false);
        let adv_x = lsgan_generator(d_x.score(&p, x_back));
        objective = objective.add(adv_x);
        report.l_d_x = value;
        report.l_adv_x = adv_x.value().item();
        report.l_u += report.l_adv_x;
    }
    report.l_p = report.l_u;

    let mut phi_out = None;
    let mut warped_out = None;
    let pr = r.as_deref().map(|r| (r, tape.bind(r.params(), true)));
    if let Some((r, pr)) = &pr {
        let phi = r.forward(pr, tape.cat_channels(&[y_hat, y]));
        let warped = resample(y_hat, phi);
        let con = loss_con(warped, y);
        let smoo = loss_smoo(phi, o.smoothness);
        objective = paired_objective(objective, con, smoo, &o.weights);
        report.l_con = con.value().item();
        report.l_smoo = smoo.value().item();
        let terms = PairedTerms { adv: report.l_adv, kd: report.l_kd, cyc: report.l_cyc, con: report.l_con, smoo: report.l_smoo };
        report.l_p = paired_total(&terms, &o.weights) + report.l_adv_x;
        phi_out = Some((*phi.value()).clone());
        warped_out = Some((*warped.value()).clone());
    }
    let total = objective.value().item();
    if !total.is_finite() || !report.is_finite() {
        return Err(non_finite(step, "generator objective", total));
    }
    let grads = tape.backward(objective);
    let g_grads = grads.for_params(nets.g.params());
    let f_grads = grads.for_params(nets.f.params());
    let r_grads = pr.as_ref().map(|(r, _)| grads.for_params(r.params()));
    let y_hat_value = (*y_hat.value()).clone();
    drop(pr);
    opt.g.step(nets.g.params_mut(), &g_grads, o.lr);
    opt.f.step(nets.f.params_mut(), &f_grads, o.lr);
    if let (Some(r), Some(rg), Some(ro)) = (r, r_grads, opt.r.as_mut()) {
        ro.step(r.params_mut(), &rg, o.lr);
    }
    Ok(StepOutput { report, y_hat: y_hat_value, phi: phi_out, warped: warped_out })
}

/// Learning rate at `step`: `base_lr` for the first two thirds of
/// `total_epochs`, then a straight line down to zero at the end.
pub fn lr_schedule(step: u64, total_epochs: usize, steps_per_epoch: usize, base_lr: f64) -> f64 {
    let total = total_epochs as f64;
    let epoch = step as f64 / steps_per_epoch.max(1) as f64;
    let decay_start = total * 2.0 / 3.0;
    if epoch <= decay_start {
        base_lr
    } else if epoch >= total {
        0.0
    } else {
        base_lr * (total - epoch) / (total - decay_start)
    }
}

/// A training record held in network range.
#[derive(Clone, Debug)]
pub struct TrainingSample {
    pub x: Tensor,
    pub z: Tensor,
    pub y_t: Tensor,
    /// Stained partner in the paired setting.
    pub y: Option<Tensor>,
    /// Ground-truth misalignment of the partner, when known.
    pub warp: Option<DeformationField>,
}

/// In-memory training set for the student. In the unpaired setting the
/// stained pool is indexed independently of the dark-field records.
#[derive(Clone, Debug)]
pub struct StudentData {
    pub samples: Vec<TrainingSample>,
    pub stained: Vec<Tensor>,
    pub paired: bool,
}

impl StudentData {
    /// Runs the frozen teacher once over every dark-field image.
    pub fn unpaired(dark: &[RasterImage], stained: &[RasterImage], teacher: &Teacher) -> Result<Self> {
        if dark.is_empty() || stained.is_empty() {
            return Err(StainError::Empty { what: "training set" });
        }
        let samples = dark.iter().map(|x| sample_for(x, teacher, None, None)).collect::<Result<_>>()?;
        let stained = stained.iter().map(|y| to_network(&[y])).collect::<Result<_>>()?;
        Ok(StudentData { samples, stained, paired: false })
    }

    pub fn paired(
        dark: &[RasterImage],
        stained: &[RasterImage],
        warps: &[Option<DeformationField>],
        teacher: &Teacher,
    ) -> Result<Self> {
        if dark.is_empty() {
            return Err(StainError::Empty { what: "training set" });
        }
        if dark.len() != stained.len() || dark.len() != warps.len() {
            return Err(StainError::Shape("paired data needs one stained image and warp per record".into()));
        }
        let samples = dark
            .iter()
            .zip(stained)
            .zip(warps)
            .map(|((x, y), w)| sample_for(x, teacher, Some(y), w.clone()))
            .collect::<Result<_>>()?;
        Ok(StudentData { samples, stained: Vec::new(), paired: true })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The `(seed, step)` batch: record indices drawn without replacement and
    /// one random crop per record. Paired records crop `y` identically.
    pub fn batch(&self, seed: u64, step: u64, size: usize, crop: usize) -> Result<StudentBatch> {
        let mut rng = step_rng(seed, step);
        let n = self.samples.len();
        let size = size.min(n);
        let picks = sample(&mut rng, n, size).into_vec();
        let (mut xs, mut zs, mut yts, mut ys) = (vec![], vec![], vec![], vec![]);
        for &i in &picks {
            let s = &self.samples[i];
            let (r, c) = crop_origin(&mut rng, &s.x, crop)?;
            xs.push(crop_tensor(&s.x, r, c, crop)?);
            zs.push(crop_tensor(&s.z, r, c, crop)?);
            yts.push(crop_tensor(&s.y_t, r, c, crop)?);
            if let Some(y) = &s.y {
                ys.push(crop_tensor(y, r, c, crop)?);
            }
        }
        if !self.paired {
            for i in sample(&mut rng, self.stained.len(), size.min(self.stained.len())).into_vec() {
                let y = &self.stained[i];
                let (r, c) = crop_origin(&mut rng, y, crop)?;
                ys.push(crop_tensor(y, r, c, crop)?);
            }
            // A small stained pool still has to fill the batch.
            while ys.len() < xs.len() {
                let y = &self.stained[rng.random_range(0..self.stained.len())];
                let (r, c) = crop_origin(&mut rng, y, crop)?;
                ys.push(crop_tensor(y, r, c, crop)?);
            }
        }
        Ok(StudentBatch {
            x: Tensor::cat_batch(&xs)?,
            z: Tensor::cat_batch(&zs)?,
            y: Tensor::cat_batch(&ys)?,
            y_t: Tensor::cat_batch(&yts)?,
        })
    }
}

fn sample_for(
    x: &RasterImage,
    teacher: &Teacher,
    y: Option<&RasterImage>,
    warp: Option<DeformationField>,
) -> Result<TrainingSample> {
    let (z, y_t) = teacher.stain(x)?;
    Ok(TrainingSample {
        x: to_network(&[x])?,
        z: to_network(&[&z])?,
        y_t: to_network(&[&y_t])?,
        y: y.map(|y| to_network(&[y])).transpose()?,
        warp,
    })
}

/// Independent RNG stream for one step, so resuming needs only the step.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn crop_origin(rng: &mut ChaCha8Rng, t: &Tensor, crop: usize) -> Result<(usize, usize)> {
    let (_, _, h, w) = t.dims4()?;
    if crop > h || crop > w || crop == 0 {
        return Err(StainError::InvalidInput(format!("crop {crop} does not fit a {h}x{w} image")));
    }
    Ok((rng.random_range(0..=h - crop), rng.random_range(0..=w - crop)))
}

/// Spatial crop of a `[N, C, H, W]` tensor.
pub fn crop_tensor(t: &Tensor, row: usize, col: usize, size: usize) -> Result<Tensor> {
    let (n, c, h, w) = t.dims4()?;
    if row + size > h || col + size > w {
        return Err(StainError::Shape(format!("crop {size}@({row},{col}) outside {h}x{w}")));
    }
    if (row, col, size, size) == (0, 0, h, w) {
        return Ok(t.clone());
    }
    let mut out = Vec::with_capacity(n * c * size * size);
    for plane in 0..n * c {
        for r in row..row + size {
            let start = plane * h * w + r * w + col;
            out.extend_from_slice(&t.data()[start..start + size]);
        }
    }
    Ok(Tensor::from_vec(&[n, c, size, size], out)?)
}

/// Settings of a student training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub crop: usize,
    pub lr: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub smoothness: SmoothnessNorm,
}

impl LoopConfig {
    pub fn total_steps(&self) -> u64 {
        (self.epochs * self.steps_per_epoch) as u64
    }
}

/// Trains from `start` up to the configured step count, calling `after`
/// after every step. Errors from `after` stop the run.
#[allow(clippy::too_many_arguments)]
pub fn run_student(
    data: &StudentData,
    nets: &mut StudentNets,
    mut r: Option<&mut RegistrationNet>,
    opt: &mut StudentOptimizers,
    cfg: &LoopConfig,
    start: u64,
    mut after: impl FnMut(u64, &StepOutput, &StudentNets, Option<&RegistrationNet>, &StudentOptimizers) -> Result<()>,
) -> Result<()> {
    if data.paired != r.is_some() {
        return Err(StainError::InvalidInput("registration network given iff data is paired".into()));
    }
    for step in start..cfg.total_steps() {
        let batch = data.batch(cfg.seed, step, cfg.batch, cfg.crop)?;
        let o = StepOptions {
            weights: cfg.weights,
            lr: lr_schedule(step, cfg.epochs, cfg.steps_per_epoch, cfg.lr),
            precision: Precision::Single,
            smoothness: cfg.smoothness,
        };
        let out = match r.as_deref_mut() {
            Some(r) => train_step_paired(step, &batch, nets, r, opt, &o)?,
            None => train_step_unpaired(step, &batch, nets, opt, &o)?,
        };
        after(step, &out, nets, r.as_deref(), opt)?;
    }
    Ok(())
}
