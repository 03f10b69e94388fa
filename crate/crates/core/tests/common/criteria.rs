//! Acceptance checks shared by the per-module suites and the `acceptance` target.
//! Each returns a one-line detail on success and the failing detail otherwise.

use std::path::Path;
use std::time::Instant;

use derain_core::data::UnpairedBatch;
use derain_core::evaluation::{psnr, ssim, SSIM_K1};
use derain_core::image::ImageTensor;
use derain_core::losses::{
    adversarial_d_var, adversarial_g_var, adversarial_value_d, color_cycle_term, color_cycle_var, contrastive_loss, frequency_term,
    frequency_var, info_nce_var, total_loss, AdversarialKind, ContrastiveConfig, ContrastiveSet, FrequencyScale, LossComponents, LossWeights,
    NegativesMode,
};
use derain_core::networks::{init_params, Binding, Cgb, Generator, ModelState, ParamSet};
use derain_core::training::{build_stream_sets, fit, lr_at, read_metrics, FitOptions, TrainConfig, Trainer, CODE_EPS};
use derain_tensor::gradcheck::{numerical_grad, relative_error};
use derain_tensor::{Graph, Tensor, Var};
use rand::Rng;

use super::oracle::{self, Map, Nets};
use super::{random_image, rng, tiny_arch, tiny_dataset, tiny_train_config, uniform_tensor};

pub type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ----- criterion 1 ---------------------------------------------------------

pub fn loss_oracles() -> Outcome {
    let start = Instant::now();
    let tol = 1e-5;
    let mut worst: Vec<(&str, f64)> = Vec::new();

    // 511 negatives, all at the positive's similarity, through both routes.
    let code = vec![0.3, -1.2, 0.7, 2.0];
    let set = ContrastiveSet::new(code.clone(), code.clone(), vec![code.clone(); 511]).map_err(|e| e.to_string())?;
    let by_sets = contrastive_loss(&[set], &ContrastiveConfig::default()).map_err(|e| e.to_string())?;
    worst.push(("ln512 sets", (by_sets - 512f64.ln()).abs()));
    let mut g = Graph::<f64>::new();
    let rows = |n: usize| Tensor::from_fn(&[n, 4], |i| code[i % 4]);
    let (q, k, e) = (g.constant(rows(256)), g.constant(rows(256)), g.constant(rows(256)));
    let l = info_nce_var(&mut g, q, k, Some(e), NegativesMode::Both, 0.07, CODE_EPS).map_err(|e| e.to_string())?;
    worst.push(("ln512 graph", (g.value(l).item() - 512f64.ln()).abs()));

    let x = Tensor::from_fn(&[3, 5, 6], |i| (i as f64 * 0.37).sin());
    let shifted = x.map(|v| v + 0.1);
    worst.push(("color 0.3", (color_cycle_term(&x, &shifted).map_err(|e| e.to_string())? - 0.3).abs()));

    let zero = Tensor::<f64>::zeros(&[3, 4, 4]);
    let mut impulse = zero.clone();
    impulse.data_mut()[0] = 1.0;
    worst.push(("impulse 12", (frequency_term(&zero, &impulse).map_err(|e| e.to_string())? - 12.0).abs()));

    let indifferent = adversarial_value_d(&[0.0; 9], &[0.0; 9]).map_err(|e| e.to_string())?;
    worst.push(("indifferent -1.3863", (indifferent - 2.0 * 0.5f64.ln()).abs()));

    let total = total_loss(&LossComponents { cont: 1.0, colorcyc: 1.0, adv: 1.0, freq: 1.0 }, &LossWeights::default()).map_err(|e| e.to_string())?;
    worst.push(("total 4.1", (total - 4.1).abs()));

    let elapsed = start.elapsed().as_secs_f64();
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    let failing: Vec<_> = worst.iter().filter(|w| !(w.1 <= tol)).map(|w| format!("{}={:.2e}", w.0, w.1)).collect();
    check(
        failing.is_empty() && elapsed < 10.0,
        format!("max |err| {max:.2e} (tol {tol:.0e}) over {} oracles in {elapsed:.2}s {}", worst.len(), failing.join(" ")),
    )
}

// ----- criterion 2 ---------------------------------------------------------

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_INSTANCES: usize = 20;
const FD_STEP: f64 = 1e-6;

/// Relative error between tape and central-difference gradients for every input.
pub fn gradient_error(inputs: &[Tensor<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &vars);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g.grad(vars[i]).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; input.numel()]);
        let numeric = numerical_grad(input, FD_STEP, |probe| {
            let mut h = Graph::new();
            let vs: Vec<Var> = inputs.iter().enumerate().map(|(j, t)| h.constant(if j == i { probe.clone() } else { t.clone() })).collect();
            let o = build(&mut h, &vs);
            h.value(o).item()
        });
        worst = worst.max(relative_error(&analytic, &numeric, 1e-8));
    }
    worst
}

fn image_pair(rng: &mut impl Rng) -> Vec<Tensor<f64>> {
    vec![uniform_tensor(&[3, 8, 8], -1.0, 1.0, rng), uniform_tensor(&[3, 8, 8], -1.0, 1.0, rng)]
}

pub fn contrastive_gradients(seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    let modes = [NegativesMode::Both, NegativesMode::InternalOnly, NegativesMode::ExternalOnly];
    (0..GRAD_INSTANCES)
        .map(|i| {
            let mode = modes[i % 3];
            let inputs = vec![
                uniform_tensor(&[5, 8], -1.0, 1.0, &mut rng),
                uniform_tensor(&[5, 8], -1.0, 1.0, &mut rng),
                uniform_tensor(&[4, 8], -1.0, 1.0, &mut rng),
            ];
            let tau = [0.07, 0.5][i % 2];
            gradient_error(&inputs, |g, v| info_nce_var(g, v[0], v[1], Some(v[2]), mode, tau, CODE_EPS).unwrap())
        })
        .collect()
}

pub fn color_gradients(seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..GRAD_INSTANCES).map(|_| gradient_error(&image_pair(&mut rng), |g, v| color_cycle_var(g, v[0], v[1]).unwrap())).collect()
}

pub fn frequency_gradients(seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    (0..GRAD_INSTANCES)
        .map(|i| {
            let scale = [FrequencyScale::Sum, FrequencyScale::PerPixel][i % 2];
            gradient_error(&image_pair(&mut rng), |g, v| frequency_var(g, v[0], v[1], scale).unwrap())
        })
        .collect()
}

pub fn adversarial_gradients(seed: u64) -> Vec<f64> {
    let mut rng = rng(seed);
    let kinds = [AdversarialKind::Log, AdversarialKind::LeastSquares];
    (0..GRAD_INSTANCES)
        .map(|i| {
            let kind = kinds[i % 2];
            let inputs = vec![uniform_tensor(&[1, 4, 4], -3.0, 3.0, &mut rng), uniform_tensor(&[1, 4, 4], -3.0, 3.0, &mut rng)];
            let d = gradient_error(&inputs, |g, v| adversarial_d_var(g, v[0], v[1], kind).unwrap());
            let gen = gradient_error(&inputs[1..], |g, v| adversarial_g_var(g, v[0], kind));
            d.max(gen)
        })
        .collect()
}

/// Tiny generator (2 base channels, 1 residual block, 8×8 input): gradients of
/// a squared-error readout of the output and every tap, w.r.t. all parameters
/// and the input.
pub fn generator_gradients(seed: u64) -> Vec<f64> {
    let arch = tiny_arch(2);
    let gen = Generator::new(&arch);
    let mut rng = rng(seed);
    (0..GRAD_INSTANCES)
        .map(|_| {
            let params = gen.init::<f64, _>(0, &mut rng);
            let x = uniform_tensor(&[3, 8, 8], -1.0, 1.0, &mut rng);
            let targets: Vec<f64> = (0..5).map(|_| rng.random_range(-0.5..0.5)).collect();
            let objective = |g: &mut Graph<f64>, set: &ParamSet<f64>, binding: Binding, input: Var| -> Var {
                let pass = gen.forward(g, set, binding, input, &arch.tap_layers).unwrap();
                let mut terms = vec![(g.squared_error_mean(pass.output.unwrap(), targets[0]), 1.0)];
                for (t, &target) in pass.taps.iter().zip(&targets[1..]) {
                    terms.push((g.squared_error_mean(*t, target), 0.5));
                }
                g.weighted_sum(&terms).unwrap()
            };
            let value = |set: &ParamSet<f64>, input: &Tensor<f64>| {
                let mut g = Graph::new();
                let v = g.constant(input.clone());
                let o = objective(&mut g, set, Binding::Frozen, v);
                g.value(o).item()
            };

            let mut g = Graph::new();
            let input = g.leaf(x.clone(), true);
            let out = objective(&mut g, &params, Binding::Trainable, input);
            g.backward(out).unwrap();
            let analytic = params.grads(&g);
            // Biases feeding instance norm have an exactly zero gradient, so the
            // error is taken over the concatenated vector, not per tensor.
            let mut tape = g.grad(input).unwrap().data().to_vec();
            let mut finite = numerical_grad(&x, FD_STEP, |p| value(&params, p));
            for i in 0..params.len() {
                let numeric = numerical_grad(params.tensor(i), FD_STEP, |p| {
                    let mut probe = params.clone();
                    *probe.tensor_mut(i) = p.clone();
                    value(&probe, &x)
                });
                let a = analytic[i].as_ref().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; numeric.len()]);
                tape.extend(a);
                finite.extend(numeric);
            }
            relative_error(&tape, &finite, 1e-8)
        })
        .collect()
}

pub fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let families: [(&str, fn(u64) -> Vec<f64>); 5] = [
        ("contrastive", contrastive_gradients),
        ("color", color_gradients),
        ("adversarial", adversarial_gradients),
        ("frequency", frequency_gradients),
        ("generator", generator_gradients),
    ];
    let mut parts = Vec::new();
    let mut ok = true;
    for (i, (name, f)) in families.iter().enumerate() {
        let errs = f(100 + i as u64);
        let max = errs.iter().cloned().fold(0.0, f64::max);
        ok &= errs.len() >= GRAD_INSTANCES && errs.iter().all(|e| *e <= GRAD_TOL);
        parts.push(format!("{name} {}x max {max:.1e}", errs.len()));
    }
    let elapsed = start.elapsed().as_secs_f64();
    check(ok && elapsed < 120.0, format!("{} (tol {GRAD_TOL:.0e}) in {elapsed:.1}s", parts.join(", ")))
}

// ----- criterion 3 ---------------------------------------------------------

/// Negatives per query for `mode`, counted on sets built from real encoder
/// features of a small model at the default contrastive configuration.
pub fn negatives_per_query(mode: NegativesMode) -> Result<Vec<usize>, String> {
    let mut cfg = TrainConfig::default();
    cfg.arch = tiny_arch(4);
    cfg.arch.tap_layers = vec![2, 3];
    // Wide enough that no sampled code is all dead units.
    cfg.arch.proj_hidden = 64;
    cfg.arch.proj_dim = 32;
    cfg.toggles.negatives_mode = mode;
    let mut r = rng(3);
    let model: ModelState<f64> = init_params(&mut r, &cfg.arch).map_err(|e| e.to_string())?;
    let img = random_image(64, 64, &mut r).into_tensor().cast::<f64>();
    let other = random_image(64, 64, &mut r).into_tensor().cast::<f64>();
    let enc = |dir, x: &Tensor<f64>| model.generator_encode(dir, x, &cfg.arch.tap_layers).map_err(|e| e.to_string());
    use derain_core::networks::Direction::{CleanToRain, RainToClean};
    let translated = model.generator_forward(RainToClean, &img).map_err(|e| e.to_string())?;
    let queries = enc(CleanToRain, &translated)?;
    let keys = enc(RainToClean, &img)?;
    let other_translated = model.generator_forward(CleanToRain, &other).map_err(|e| e.to_string())?;
    let other_queries = enc(RainToClean, &other_translated)?;
    let sets = build_stream_sets(&model, Cgb::Forward, &queries, &keys, Some(&other_queries), &cfg, &mut r).map_err(|e| e.to_string())?;
    Ok(sets.iter().flatten().map(|s| s.negatives().len()).collect())
}

pub fn counting() -> Outcome {
    let cfg = TrainConfig::default();
    let mut parts = vec![format!("config internal {} external {}", cfg.internal_count(), cfg.external_count())];
    let mut ok = cfg.internal_count() == 255 && cfg.external_count() == 256;
    for (mode, expected) in [(NegativesMode::Both, 511), (NegativesMode::InternalOnly, 255), (NegativesMode::ExternalOnly, 255)] {
        let counts = negatives_per_query(mode)?;
        ok &= counts.len() == 2 * 256 && counts.iter().all(|&c| c == expected);
        parts.push(format!("{mode:?} {}x{}", counts.len(), counts.first().copied().unwrap_or(0)));
    }
    check(ok, parts.join(", "))
}

// ----- criterion 4 ---------------------------------------------------------

pub fn schedule() -> Outcome {
    let cfg = TrainConfig::default();
    let mut mismatches = Vec::new();
    for epoch in 0..600 {
        let expected = if epoch < 300 { 1e-4 } else { 1e-4 * (1.0 - (epoch - 300 + 1) as f64 / 300.0) };
        let got = lr_at(epoch, &cfg).map_err(|e| e.to_string())?;
        if got != expected {
            mismatches.push(format!("epoch {epoch}: {got:e} vs {expected:e}"));
        }
    }
    let end = lr_at(599, &cfg).map_err(|e| e.to_string())?;
    let out_of_range = lr_at(600, &cfg).is_err();
    check(
        mismatches.is_empty() && end == 0.0 && out_of_range,
        format!("600 epochs exact, lr(599) = {end:e}, lr(600) rejected = {out_of_range} {}", mismatches.join("; ")),
    )
}

// ----- criteria 5 and 6 ----------------------------------------------------

pub const DESK_SEEDS: [u64; 3] = [0, 1, 2];
pub const DESK_MIN_GAIN_DB: f64 = 1.5;

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Gains of the full and the no-contrastive toy models over `DESK_SEEDS`.
pub fn desk_gains(work: &Path) -> Result<(Vec<f64>, Vec<f64>), String> {
    use derain_core::desk::{prepare_desk_data, run_desk, toy_config, DESK_ITERATIONS};
    let data = work.join("data");
    prepare_desk_data(&data, 0).map_err(|e| e.to_string())?;
    let (mut full, mut ablated) = (Vec::new(), Vec::new());
    for seed in DESK_SEEDS {
        let cfg = toy_config(seed, &data);
        let o = run_desk(&cfg, &work.join(format!("full-{seed}")), DESK_ITERATIONS).map_err(|e| e.to_string())?;
        full.push(o.gain_db());
        let mut cfg = toy_config(seed, &data);
        cfg.toggles.use_cont = false;
        let o = run_desk(&cfg, &work.join(format!("nocont-{seed}")), DESK_ITERATIONS).map_err(|e| e.to_string())?;
        ablated.push(o.gain_db());
    }
    Ok((full, ablated))
}

pub fn desk_scale(full: &[f64]) -> Outcome {
    let m = median(full);
    check(m >= DESK_MIN_GAIN_DB, format!("median gain {m:+.3} dB (need ≥ +{DESK_MIN_GAIN_DB}) over seeds {full:.3?}"))
}

pub fn ablation_direction(full: &[f64], ablated: &[f64]) -> Outcome {
    let (mf, ma) = (median(full), median(ablated));
    check(ma <= mf, format!("median gain without contrastive {ma:+.3} dB vs full {mf:+.3} dB ({ablated:.3?})"))
}

// ----- criterion 7 ---------------------------------------------------------

pub fn determinism_and_resume(work: &Path) -> Outcome {
    let data = work.join("data");
    tiny_dataset(&data, 4, 32);
    let cfg = tiny_train_config(&data, 32);
    let run = |out: &Path, resume: Option<&Path>, stop: Option<usize>| {
        let opts = FitOptions { out_dir: out.to_path_buf(), resume: resume.map(Path::to_path_buf), stop_after_epoch: stop, max_iterations: None };
        fit(&cfg, &opts).map_err(|e| e.to_string())
    };
    let (a, b, c) = (work.join("a"), work.join("b"), work.join("c"));
    let fa = run(&a, None, None)?;
    run(&b, None, None)?;
    run(&c, None, Some(1))?;
    let fc = run(&c, Some(&c.join("checkpoints").join("epoch-0001")), None)?;
    let bytes = |p: &Path| std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()));
    let same_seed = bytes(&a.join("metrics.jsonl"))? == bytes(&b.join("metrics.jsonl"))?;
    let resumed = bytes(&a.join("metrics.jsonl"))? == bytes(&c.join("metrics.jsonl"))?;
    let params = bytes(&fa.final_checkpoint.join("params.bin"))? == bytes(&fc.final_checkpoint.join("params.bin"))?;
    let lines = read_metrics(&a.join("metrics.jsonl")).map_err(|e| e.to_string())?.len();
    check(
        same_seed && resumed && params && lines == 8,
        format!("{lines} iterations; same-seed logs identical {same_seed}, resumed log identical {resumed}, final params identical {params}"),
    )
}

// ----- criterion 8 ---------------------------------------------------------

/// Direct windowed SSIM on two planes: the Gaussian weights are evaluated
/// per window position without separable filtering.
pub fn reference_ssim(x: &[f64], y: &[f64], h: usize, w: usize) -> f64 {
    let k = 11usize;
    let sigma = 1.5f64;
    let mut weights = vec![0.0; k * k];
    let mut total = 0.0;
    for i in 0..k {
        for j in 0..k {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            weights[i * k + j] = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += weights[i * k + j];
        }
    }
    weights.iter_mut().for_each(|v| *v /= total);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut acc = 0.0;
    let mut count = 0;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (oy + i) * w + ox + j;
                    mx += weights[i * k + j] * x[p];
                    my += weights[i * k + j] * y[p];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (oy + i) * w + ox + j;
                    let wt = weights[i * k + j];
                    vx += wt * (x[p] - mx).powi(2);
                    vy += wt * (y[p] - my).powi(2);
                    cxy += wt * (x[p] - mx) * (y[p] - my);
                }
            }
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    acc / count as f64
}

fn rgb8_image(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> u8) -> ImageTensor {
    let img = image::RgbImage::from_fn(w as u32, h as u32, |x, y| image::Rgb([0, 1, 2].map(|c| f(c, y as usize, x as usize))));
    ImageTensor::from_rgb8(&img)
}

pub fn metric_sanity() -> Outcome {
    let tol = 1e-4;
    let a = rgb8_image(16, 16, |c, y, x| (37 * c + 11 * y + 5 * x) as u8 % 200);
    let b = rgb8_image(16, 16, |c, y, x| (37 * c + 11 * y + 5 * x) as u8 % 200 + 1);
    let p = psnr(&a, &b).map_err(|e| e.to_string())?;
    let p_ref = 20.0 * 255f64.log10();
    let black = ImageTensor::filled(3, 16, 16, -1.0);
    let white = ImageTensor::filled(3, 16, 16, 1.0);
    let s = ssim(&black, &white).map_err(|e| e.to_string())?;
    let s_closed = SSIM_K1.powi(2) / (1.0 + SSIM_K1.powi(2));
    let s_ref = reference_ssim(&vec![0.0; 256], &vec![1.0; 256], 16, 16);
    let rel = |x: f64, r: f64| ((x - r) / r).abs();
    let worst = rel(p, p_ref).max(rel(s, s_ref)).max(rel(s_ref, s_closed));
    check(worst <= tol, format!("psnr {p:.4} vs {p_ref:.4} dB, ssim {s:.6e} vs reference {s_ref:.6e} (closed form {s_closed:.6e}); max rel {worst:.1e}"))
}

// ----- criterion 9 ---------------------------------------------------------

fn flat(set: &derain_core::networks::ParamSet<f64>) -> Vec<Vec<f64>> {
    set.tensors().iter().map(|t| t.data().to_vec()).collect()
}

/// Tape generator gradients of one training step against forward-mode
/// derivatives of the straight-line reference along random and coordinate
/// directions. Returns the worst relative error.
pub fn oracle_equivalence_error(seed: u64, directions: usize) -> Result<f64, String> {
    let mut cfg = TrainConfig::default();
    cfg.arch = tiny_arch(4);
    cfg.toggles.use_cont = false;
    cfg.toggles.use_freq = false;
    cfg.training.image_pool_size = 0;
    cfg.training.crop = 24;
    cfg.training.seed = seed;
    let mut trainer: Trainer<f64> = Trainer::new(cfg.clone()).map_err(|e| e.to_string())?;
    trainer.capture_generator_grads = true;
    let before = trainer.state.model.clone();
    let mut r = rng(seed + 1000);
    let batch = UnpairedBatch { rainy: random_image(24, 24, &mut r), clean: random_image(24, 24, &mut r) };
    trainer.train_step(std::slice::from_ref(&batch)).map_err(|e| e.to_string())?;
    let grads = trainer.last_generator_grads.clone().ok_or("no captured gradients")?;
    let after = &trainer.state.model;

    let values: Vec<Vec<f64>> = flat(&before.g_r2n).into_iter().chain(flat(&before.g_n2r)).collect();
    let tape: Vec<Vec<f64>> = grads
        .g_r2n
        .iter()
        .chain(&grads.g_n2r)
        .zip(&values)
        .map(|(g, v)| g.as_ref().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; v.len()]))
        .collect();
    let zeros = |set: &derain_core::networks::ParamSet<f64>| flat(set).iter().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
    let d_r = oracle::layers_with_direction(&flat(&after.d_r), &zeros(&after.d_r));
    let d_n = oracle::layers_with_direction(&flat(&after.d_n), &zeros(&after.d_n));
    let rm = Map::from_values(3, 24, 24, batch.rainy.data());
    let nm = Map::from_values(3, 24, 24, batch.clean.data());
    let half = before.g_r2n.len();
    let total: usize = values.iter().map(Vec::len).sum();

    let mut worst: f64 = 0.0;
    for d in 0..directions {
        // Alternate dense Gaussian directions with single coordinates.
        let dir: Vec<Vec<f64>> = if d % 2 == 0 {
            values.iter().map(|v| v.iter().map(|_| r.random_range(-1.0..1.0)).collect()).collect()
        } else {
            let mut pick = r.random_range(0..total);
            values
                .iter()
                .map(|v| {
                    let mut out = vec![0.0; v.len()];
                    if pick < v.len() {
                        out[pick] = 1.0;
                    }
                    pick = pick.wrapping_sub(v.len());
                    out
                })
                .collect()
        };
        let g_r2n = oracle::layers_with_direction(&values[..half], &dir[..half]);
        let g_n2r = oracle::layers_with_direction(&values[half..], &dir[half..]);
        let nets = Nets { g_r2n: &g_r2n, g_n2r: &g_n2r, d_r: &d_r, d_n: &d_n, base: 4, n_res: 1 };
        let reference = oracle::objective(&nets, &rm, &nm, cfg.weights.lambda2, cfg.weights.lambda3).d;
        let projected: f64 = tape.iter().flatten().zip(dir.iter().flatten()).map(|(g, v)| g * v).sum();
        let scale = reference.abs().max(projected.abs()).max(1e-9);
        worst = worst.max((reference - projected).abs() / scale);
    }
    Ok(worst)
}

pub const ORACLE_TOL: f64 = 1e-6;

pub fn oracle_equivalence() -> Outcome {
    let worst = oracle_equivalence_error(5, 24)?;
    check(worst <= ORACLE_TOL, format!("24 directional derivatives, max rel err {worst:.2e} (tol {ORACLE_TOL:.0e})"))
}
