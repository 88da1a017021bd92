//! Built-in verification suite: finite-difference gradient checks for every
//! differentiable component, brute-force metric oracles and resampling
//! kernel normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::blocks::{ChannelAttentionSpec, RcabSpec};
use crate::data::{contributions, ColorSpace, ImagePlane, Range};
use crate::discriminators::{
    relativistic_criterion, Discriminator, DiscriminatorSpec, FeatureExtractor, FeatureExtractorSpec,
};
use crate::engine::{finite_diff_check, GradCheckOptions, ParamStore, Shape, Tape, Tensor, Var};
use crate::error::Result;
use crate::generator::{Generator, GeneratorSpec};
use crate::losses::{
    adv_loss_discriminator, adv_loss_generator, charbonnier_loss, perceptual_loss, total_generator_loss,
    CharbonnierParams, GeneratorTerms, LossWeights, PerceptualDistance,
};
use crate::metrics::{gaussian_window, psnr, rmse_pirm, ssim, SSIM_K1, SSIM_K2, SSIM_WINDOW};

/// Result of one named check.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        Outcome {
            name: name.to_owned(),
            passed,
            detail,
        }
    }

    pub fn line(&self) -> String {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        format!("{tag} {} ({})", self.name, self.detail)
    }
}

pub fn all_passed(outcomes: &[Outcome]) -> bool {
    outcomes.iter().all(|o| o.passed)
}

fn random(shape: Shape, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Mean of `v` times a fixed random tensor, so no gradient cancels by
/// symmetry.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let r = tape.constant(random(tape.shape(v), seed))?;
    let p = tape.mul(v, r)?;
    tape.mean_all(p)
}

fn grad_case(name: &str, store: &ParamStore, f: impl FnMut(&mut Tape, &ParamStore) -> Result<Var>) -> Outcome {
    match finite_diff_check(store, f, GradCheckOptions::default()) {
        Ok(report) => {
            let detail = report
                .worst()
                .map(|w| format!("worst {} rel {:.2e}", w.name, w.max_rel_err))
                .unwrap_or_else(|| "no trainable parameters".into());
            Outcome::new(name, report.passed() && report.checked() > 0, detail)
        }
        Err(e) => Outcome::new(name, false, e.to_string()),
    }
}

fn op_cases(out: &mut Vec<Outcome>) {
    let s = Shape::new(2, 3, 4, 4);
    let mut store = ParamStore::new();
    store.insert("a", random(s, 1));
    store.insert("b", random(s, 2));
    store.insert("w", random(Shape::new(4, 3, 3, 3), 3));
    store.insert("bias", random(Shape::new(4, 1, 1, 1), 4));
    store.insert("gate", random(Shape::new(2, 3, 1, 1), 5));
    store.insert("fc", random(Shape::new(5, 48, 1, 1), 6));
    store.insert("fcb", random(Shape::new(5, 1, 1, 1), 7));
    let positive = Tensor::from_fn(s, |n, c, h, w| 0.05 + 0.1 * ((n + c + h + w) % 7) as f64);

    for stride in [1, 2] {
        out.push(grad_case(&format!("conv2d stride {stride}"), &store, |tape, st| {
            let a = tape.param(st, "a")?;
            let w = tape.param(st, "w")?;
            let b = tape.param(st, "bias")?;
            let y = tape.conv2d(a, w, Some(b), stride, 1)?;
            project(tape, y, 10)
        }));
    }
    out.push(grad_case("activations", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let y = tape.leaky_relu(a, 0.2)?;
        let z = tape.sigmoid(y)?;
        let r = tape.relu(a)?;
        let s = tape.add(z, r)?;
        project(tape, s, 11)
    }));
    out.push(grad_case("global average pool", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let p = tape.global_avg_pool(a)?;
        project(tape, p, 12)
    }));
    out.push(grad_case("elementwise arithmetic", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let b = tape.param(st, "b")?;
        let x = tape.add(a, b)?;
        let y = tape.sub(x, b)?;
        let z = tape.mul(y, b)?;
        let u = tape.scale(z, -1.7)?;
        let v = tape.one_minus(u)?;
        project(tape, v, 13)
    }));
    out.push(grad_case("channel gating", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let g = tape.param(st, "gate")?;
        let y = tape.channel_mul(g, a)?;
        project(tape, y, 14)
    }));
    out.push(grad_case("fully connected", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let fc = tape.param(st, "fc")?;
        let b = tape.param(st, "fcb")?;
        let y = tape.fully_connected(a, fc, Some(b))?;
        project(tape, y, 15)
    }));
    out.push(grad_case("mean subtraction", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let g = tape.param(st, "gate")?;
        let m = tape.mean_all(g)?;
        let y = tape.sub_scalar(a, m)?;
        project(tape, y, 16)
    }));
    out.push(grad_case("pixel shuffle", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let w = tape.param(st, "w")?;
        let y = tape.conv2d(a, w, None, 1, 1)?;
        let z = tape.pixel_unshuffle(y, 2)?;
        let u = tape.pixel_shuffle(z, 2)?;
        project(tape, u, 17)
    }));
    let mut pos = ParamStore::new();
    pos.insert("p", positive);
    out.push(grad_case("clamped log", &pos, |tape, st| {
        let p = tape.param(st, "p")?;
        let y = tape.log_clamped(p, 1e-12)?;
        project(tape, y, 18)
    }));
    out.push(grad_case("distance losses", &store, |tape, st| {
        let a = tape.param(st, "a")?;
        let b = tape.param(st, "b")?;
        let c = tape.charbonnier(a, b, 1e-3)?;
        let m = tape.mse(a, b)?;
        let l = tape.l1(a, b)?;
        let cm = tape.add(c, m)?;
        tape.add(cm, l)
    }));
}

/// One kernel used twice must receive the sum of its per-use gradients.
fn shared_parameter_case() -> Outcome {
    let name = "shared-parameter accumulation";
    let x = random(Shape::new(1, 2, 5, 5), 20);
    let w = random(Shape::new(2, 2, 3, 3), 21);
    let mut tied = ParamStore::new();
    tied.insert("w", w.clone());
    let mut untied = ParamStore::new();
    untied.insert("w0", w.clone());
    untied.insert("w1", w);
    let run = |store: &ParamStore, n0: &str, n1: &str| -> Result<(f64, crate::engine::Gradients)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone())?;
        let w0 = tape.param(store, n0)?;
        let h = tape.conv2d(xv, w0, None, 1, 1)?;
        let w1 = tape.param(store, n1)?;
        let y = tape.conv2d(h, w1, None, 1, 1)?;
        let loss = project(&mut tape, y, 22)?;
        Ok((tape.value(loss).item()?, tape.backward(loss)?))
    };
    let compare = || -> Result<f64> {
        let (_, gt) = run(&tied, "w", "w")?;
        let (_, gu) = run(&untied, "w0", "w1")?;
        let (Some(t), Some(a), Some(b)) = (gt.param("w"), gu.param("w0"), gu.param("w1")) else {
            return Ok(f64::INFINITY);
        };
        Ok(t.data()
            .iter()
            .zip(a.data())
            .zip(b.data())
            .map(|((t, a), b)| (t - (a + b)).abs() / t.abs().max(1.0))
            .fold(0.0, f64::max))
    };
    let gap = match compare() {
        Ok(g) => g,
        Err(e) => return Outcome::new(name, false, e.to_string()),
    };
    let fd = grad_case(name, &tied, |tape, st| {
        let xv = tape.constant(x.clone())?;
        let w = tape.param(st, "w")?;
        let h = tape.conv2d(xv, w, None, 1, 1)?;
        let w = tape.param(st, "w")?;
        let y = tape.conv2d(h, w, None, 1, 1)?;
        project(tape, y, 22)
    });
    Outcome::new(
        name,
        gap <= 1e-12 && fd.passed,
        format!("tied vs untied sum {gap:.1e}, {}", fd.detail),
    )
}

fn block_cases(out: &mut Vec<Outcome>) {
    let spec = ChannelAttentionSpec::new(16);
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let mut store = ParamStore::new();
    spec.init(&mut store, "ca", 1.0, &mut rng);
    store.insert("x", random(Shape::new(2, 16, 3, 3), 31));
    out.push(grad_case("channel attention", &store, |tape, s| {
        let x = tape.param(s, "x")?;
        let y = spec.forward(tape, s, "ca", x)?;
        project(tape, y, 32)
    }));

    for share in [true, false] {
        let spec = RcabSpec {
            share_parameters: share,
            ..RcabSpec::new(4)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut store = ParamStore::new();
        spec.init(&mut store, "b", 1.0, &mut rng);
        store.insert("x", random(Shape::new(2, 4, 4, 4), 34));
        let label = if share { "residual block (shared)" } else { "residual block (unshared)" };
        out.push(grad_case(label, &store, |tape, s| {
            let x = tape.param(s, "x")?;
            let y = spec.forward(tape, s, "b", x)?;
            project(tape, y, 35)
        }));
    }
}

fn network_cases(out: &mut Vec<Outcome>) -> Result<()> {
    let g = Generator::build(GeneratorSpec::new(2, 8, 4), 40, 1.0)?;
    let mut store = g.params.clone();
    store.insert("input", random(Shape::new(1, 3, 3, 3), 41));
    let spec = g.spec;
    out.push(grad_case("generator", &store, |tape, s| {
        let gen = Generator {
            spec,
            params: s.clone(),
        };
        let x = tape.param(s, "input")?;
        let y = gen.forward(tape, x)?;
        project(tape, y, 42)
    }));

    // LeakyReLU is not differentiable at zero; these inputs keep every
    // pre-activation more than one probe step away from it.
    for (label, dspec, input, input_seed) in [
        ("pixel discriminator", DiscriminatorSpec::pixel(2, 8).with_hidden(4), Shape::new(2, 3, 8, 8), 7),
        ("feature discriminator", DiscriminatorSpec::feature(3, 2).with_hidden(4), Shape::new(2, 3, 6, 6), 9),
    ] {
        let d = Discriminator::build(dspec, 8)?;
        let mut store = d.params.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(input_seed);
        store.insert("input", Tensor::from_fn(input, |_, _, _, _| rng.random_range(0.0..1.0)));
        out.push(grad_case(label, &store, |tape, s| {
            let disc = Discriminator {
                spec: dspec,
                params: s.clone(),
            };
            let x = tape.param(s, "input")?;
            let y = disc.forward(tape, x)?;
            let sq = tape.mul(y, y)?;
            tape.mean_all(sq)
        }));
    }

    let phi = FeatureExtractor::build(FeatureExtractorSpec { channels: vec![3, 4] }, 44)?;
    let mut store = ParamStore::new();
    store.insert("sr", random(Shape::new(2, 3, 6, 6), 45));
    let hr = random(Shape::new(2, 3, 6, 6), 46);
    for distance in [PerceptualDistance::Squared, PerceptualDistance::Absolute] {
        out.push(grad_case(&format!("perceptual loss ({distance:?})"), &store, |tape, s| {
            let sr = tape.param(s, "sr")?;
            let h = tape.constant(hr.clone())?;
            perceptual_loss(tape, &phi, sr, h, distance)
        }));
    }
    Ok(())
}

fn loss_cases(out: &mut Vec<Outcome>) {
    let x = random(Shape::new(1, 3, 3, 3), 50);
    let mut store = ParamStore::new();
    store.insert("sr", x.clone());
    out.push(grad_case("charbonnier at zero difference", &store, |tape, s| {
        let sr = tape.param(s, "sr")?;
        let hr = tape.constant(x.clone())?;
        charbonnier_loss(tape, sr, hr, CharbonnierParams::default())
    }));

    let mut scores = ParamStore::new();
    scores.insert("real", random(Shape::new(3, 1, 1, 1), 51));
    scores.insert("fake", random(Shape::new(3, 1, 1, 1), 52));
    out.push(grad_case("relativistic criterion", &scores, |tape, s| {
        let r = tape.param(s, "real")?;
        let f = tape.param(s, "fake")?;
        let c = relativistic_criterion(tape, r, f)?;
        project(tape, c, 53)
    }));
    for (label, f) in [
        ("adversarial generator loss", adv_loss_generator as fn(&mut Tape, Var, Var) -> Result<Var>),
        ("adversarial discriminator loss", adv_loss_discriminator),
    ] {
        out.push(grad_case(label, &scores, |tape, s| {
            let r = tape.param(s, "real")?;
            let k = tape.param(s, "fake")?;
            f(tape, r, k)
        }));
    }

    let mut terms = ParamStore::new();
    terms.insert("sr", random(Shape::new(1, 3, 4, 4), 54));
    terms.insert("real", random(Shape::new(2, 1, 1, 1), 55));
    terms.insert("fake", random(Shape::new(2, 1, 1, 1), 56));
    let hr = random(Shape::new(1, 3, 4, 4), 57);
    out.push(grad_case("weighted total loss", &terms, |tape, s| {
        let sr = tape.param(s, "sr")?;
        let h = tape.constant(hr.clone())?;
        let r = tape.param(s, "real")?;
        let f = tape.param(s, "fake")?;
        let terms = GeneratorTerms {
            perceptual: tape.mse(sr, h)?,
            l1: tape.l1(sr, h)?,
            adv_pixel: Some(adv_loss_generator(tape, r, f)?),
            adv_feature: Some(adv_loss_generator(tape, f, r)?),
        };
        Ok(total_generator_loss(tape, &LossWeights::REGION3, &terms)?.0)
    }));
}

/// Finite-difference checks of every op, block, network and loss.
pub fn gradient_suite() -> Vec<Outcome> {
    let mut out = Vec::new();
    op_cases(&mut out);
    out.push(shared_parameter_case());
    block_cases(&mut out);
    if let Err(e) = network_cases(&mut out) {
        out.push(Outcome::new("network construction", false, e.to_string()));
    }
    loss_cases(&mut out);
    out
}

fn random_image(w: usize, h: usize, seed: u64) -> Result<ImagePlane> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::from_fn(w, h, ColorSpace::Rgb, Range::Byte, |_, _, _| rng.random_range(0..=255) as f64)
}

fn y_plane(img: &ImagePlane) -> Vec<f64> {
    let n = img.width() * img.height();
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..n)
        .map(|i| 16.0 + (65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0)
        .collect()
}

/// Direct-window SSIM of one plane with a 2-d Gaussian.
fn reference_ssim(a: &[f64], b: &[f64], w: usize, h: usize, border: usize, peak: f64) -> f64 {
    let g = gaussian_window();
    let (c1, c2) = ((SSIM_K1 * peak).powi(2), (SSIM_K2 * peak).powi(2));
    let k = SSIM_WINDOW;
    let (x0, y0) = (border, border);
    let (cw, ch) = (w - 2 * border, h - 2 * border);
    let mut total = 0.0;
    let mut count = 0.0;
    for oy in 0..=ch - k {
        for ox in 0..=cw - k {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let wt = g[i] * g[j];
                    let idx = (y0 + oy + i) * w + x0 + ox + j;
                    ma += wt * a[idx];
                    mb += wt * b[idx];
                    saa += wt * a[idx] * a[idx];
                    sbb += wt * b[idx] * b[idx];
                    sab += wt * a[idx] * b[idx];
                }
            }
            let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1.0;
        }
    }
    total / count
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// PSNR, SSIM and RMSE against direct recomputation on random byte images.
pub fn metric_oracles(pairs: usize) -> Vec<Outcome> {
    let run = || -> Result<f64> {
        let mut worst: f64 = 0.0;
        for i in 0..pairs as u64 {
            let (w, h) = (20 + (i as usize % 5), 22 + (i as usize % 3));
            let a = random_image(w, h, 2 * i + 100)?;
            let b = random_image(w, h, 2 * i + 101)?;
            let (ya, yb) = (y_plane(&a), y_plane(&b));
            let border = 4;
            let mut se = 0.0;
            let mut n = 0.0;
            for y in border..h - border {
                for x in border..w - border {
                    let d = ya[y * w + x] - yb[y * w + x];
                    se += d * d;
                    n += 1.0;
                }
            }
            let want_psnr = 10.0 * (255.0f64 * 255.0 / (se / n)).log10();
            worst = worst.max(rel(psnr(&a, &b, border, true)?, want_psnr));
            let want_ssim = reference_ssim(&ya, &yb, w, h, border, 255.0);
            worst = worst.max(rel(ssim(&a, &b, border, true)?, want_ssim));
            let mut se = 0.0;
            let mut n = 0.0;
            for c in 0..3 {
                for y in 4..h - 4 {
                    for x in 4..w - 4 {
                        let d = a.get(c, y, x) - b.get(c, y, x);
                        se += d * d;
                        n += 1.0;
                    }
                }
            }
            worst = worst.max(rel(rmse_pirm(&a, &b)?, (se / n).sqrt()));
        }
        Ok(worst)
    };
    vec![match run() {
        Ok(worst) => Outcome::new(
            "metric oracles",
            worst <= 1e-10,
            format!("{pairs} pairs, worst rel {worst:.1e}"),
        ),
        Err(e) => Outcome::new("metric oracles", false, e.to_string()),
    }]
}

/// Resampling weights sum to one at every output sample.
pub fn partition_of_unity() -> Vec<Outcome> {
    let mut out = Vec::new();
    for (label, scale) in [("1/4", 0.25), ("1/2", 0.5), ("2", 2.0), ("4", 4.0)] {
        let mut worst: f64 = 0.0;
        let mut error = None;
        for in_len in [7usize, 24, 31] {
            for antialias in [true, false] {
                let out_len = (in_len as f64 * scale).ceil() as usize;
                match contributions(in_len, out_len, scale, antialias) {
                    Ok(taps) => {
                        for t in taps {
                            worst = worst.max((t.weights.iter().sum::<f64>() - 1.0).abs());
                        }
                    }
                    Err(e) => error = Some(e.to_string()),
                }
            }
        }
        out.push(match error {
            Some(e) => Outcome::new(&format!("partition of unity at scale {label}"), false, e),
            None => Outcome::new(
                &format!("partition of unity at scale {label}"),
                worst <= 1e-12,
                format!("max deviation {worst:.1e}"),
            ),
        });
    }
    out
}

/// Everything `selfcheck` runs.
pub fn run_all() -> Vec<Outcome> {
    let mut out = gradient_suite();
    out.extend(metric_oracles(5));
    out.extend(partition_of_unity());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        let outcomes = run_all();
        for o in &outcomes {
            assert!(o.passed, "{}", o.line());
        }
        assert!(outcomes.len() > 20);
    }
}
