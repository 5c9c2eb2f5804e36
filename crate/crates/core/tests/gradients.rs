//! Central-difference checks of the training losses on 4×4 toy networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stainkd_core::align::{loss_con, loss_smoo, resample, SmoothnessNorm};
use stainkd_core::student::{loss_cyc, loss_kd, lsgan_discriminator, lsgan_generator};
use stainkd_nn::{Precision, Tape, Tensor, Var};

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Largest relative error between analytic and central-difference gradients
/// over every element of every input.
fn max_rel_error(inputs: &[Tensor], f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let tape = Tape::new(Precision::Double);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let grads = tape.backward(f(&vars));
    let eval = |inputs: &[Tensor]| {
        let tape = Tape::inference(Precision::Double);
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).value().item()
    };
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for i in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += eps;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let a = analytic.data()[i];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
        }
    }
    worst
}

/// One 3×3 convolution and a tanh: the toy generator.
fn toy_net<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
    x.conv2d(w, Some(b), 1, 1).tanh()
}

/// Smallest `|a − b|` between the toy output and a target, used to keep the
/// samples away from the ℓ1 kink.
fn min_gap(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(f64::INFINITY, f64::min)
}

fn toy_output(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let tape = Tape::inference(Precision::Double);
    (*toy_net(tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone())).value()).clone()
}

/// Seeds whose residuals all stay at least `margin` from zero.
fn away_from_kinks(seed: u64, margin: f64) -> (Tensor, Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let x = random(&[1, 4, 4, 4], -1.0, 1.0, &mut rng);
        let w = random(&[3, 4, 3, 3], -0.3, 0.3, &mut rng);
        let b = random(&[3], -0.1, 0.1, &mut rng);
        let t = random(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
        if min_gap(&toy_output(&x, &w, &b), &t) > margin {
            return (x, w, b, t);
        }
    }
}

#[test]
fn kd_loss_gradient() {
    let (x, w, b, y_t) = away_from_kinks(1, 0.02);
    let err = max_rel_error(&[x, w, b, y_t], |v| loss_kd(toy_net(v[0], v[1], v[2]), v[3]));
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn cycle_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (x, wg, bg, _) = away_from_kinks(2, 0.0);
    loop {
        let wf = random(&[4, 3, 3, 3], -0.3, 0.3, &mut rng);
        let bf = random(&[4], -0.1, 0.1, &mut rng);
        let y_hat = toy_output(&x, &wg, &bg);
        if min_gap(&toy_output(&y_hat, &wf, &bf), &x) < 0.02 {
            continue;
        }
        let err = max_rel_error(&[x.clone(), wg.clone(), bg.clone(), wf, bf], |v| {
            loss_cyc(|y| toy_net(y, v[3], v[4]), toy_net(v[0], v[1], v[2]), v[0])
        });
        assert!(err < 1e-3, "relative error {err}");
        break;
    }
}

#[test]
fn adversarial_losses_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x, wg, bg, y) = away_from_kinks(3, 0.0);
    let wd = random(&[1, 3, 4, 4], -0.3, 0.3, &mut rng);
    let bd = random(&[1], -0.1, 0.1, &mut rng);
    fn d<'t>(img: Var<'t>, w: Var<'t>, b: Var<'t>) -> Var<'t> {
        img.conv2d(w, Some(b), 2, 1).leaky_relu(0.2).mean_per_item()
    }
    let inputs = [x, wg, bg, wd, bd, y];
    let err = max_rel_error(&inputs, |v| lsgan_generator(d(toy_net(v[0], v[1], v[2]), v[3], v[4])));
    assert!(err < 1e-3, "L_adv relative error {err}");
    let err = max_rel_error(&inputs, |v| lsgan_discriminator(d(v[5], v[3], v[4]), d(toy_net(v[0], v[1], v[2]), v[3], v[4])));
    assert!(err < 1e-3, "L_D relative error {err}");
}

/// Random field with every sample point kept off the integer lattice, where
/// bilinear interpolation has kinks.
fn off_lattice_field(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Tensor {
    let data = (0..2 * h * w)
        .map(|_| {
            let whole = rng.random_range(-1i32..=1) as f64;
            whole + rng.random_range(0.1..0.9)
        })
        .collect();
    Tensor::from_vec(&[1, 2, h, w], data).unwrap()
}

#[test]
fn content_loss_gradient_wrt_field_and_generator() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (x, w, b, _) = away_from_kinks(4, 0.0);
    let y = random(&[1, 3, 4, 4], -1.0, 1.0, &mut rng);
    // Keep sample points inside the image so the clamp never engages.
    let mut phi = off_lattice_field(&mut rng, 4, 4);
    for i in 0..4 {
        for j in 0..4 {
            let k = i * 4 + j;
            let fx = phi.data()[k].clamp(-(j as f64) + 0.05, 2.95 - j as f64);
            let fy = phi.data()[16 + k].clamp(-(i as f64) + 0.05, 2.95 - i as f64);
            phi.data_mut()[k] = fx;
            phi.data_mut()[16 + k] = fy;
        }
    }
    let err = max_rel_error(&[x, w, b, phi, y], |v| loss_con(resample(toy_net(v[0], v[1], v[2]), v[3]), v[4]));
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn smoothness_gradient_away_from_zero_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let phi = random(&[2, 2, 4, 4], -2.0, 2.0, &mut rng);
    for norm in [SmoothnessNorm::Unsquared, SmoothnessNorm::Squared] {
        let err = max_rel_error(std::slice::from_ref(&phi), |v| loss_smoo(v[0], norm));
        assert!(err < 1e-3, "{norm:?} relative error {err}");
    }
}
