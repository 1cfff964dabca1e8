//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `KSEG_ACCEPTANCE=1,4,7` restricts the run to the listed criteria.

use std::collections::BTreeMap;
use std::process::{Command, ExitCode};
use std::time::Instant;

use num_complex::{Complex32, Complex64};

use kseg::evaluation::{
    acceleration_conditions, evaluate_condition, failure_rate, run_sweep, window_starts, Condition, EvalConfig, VoteTally,
};
use kseg::features::{
    bridge_channels, bridge_gradient_weights, coherent_sum, radial_energy_profile, relative_phase, LESION_CLASS,
};
use kseg::kspace::{prepare_exam, ComplexVolume, Domain, PreparedExam, Timepoint};
use kseg::models::{build_model, complexity_report, patch_tensor, Model, ModelConfig, ModelVariant, REFERENCE_INPUT};
use kseg::nn::{Graph, Tensor};
use kseg::phantom::{generate_cohort, generate_exam, PhantomSpec};
use kseg::sampling::{add_noise, derive_seed, random_mask, AccelSchedule, SplitMix64};
use kseg::stats::{bootstrap_ci, holm_adjust, wilcoxon_paired};
use kseg::training::{
    clip_grad_norm, cosine_lr, dice_focal_loss, kspace_mse_aux, overfit, sample_loss_grad, train, TrainConfig,
};
use kseg::Error;

type Check = Result<String, String>;
type Suite = (usize, &'static str, fn() -> Check);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: Error) -> String {
    e.to_string()
}

fn random_volume(rng: &mut SplitMix64, shape: (usize, usize, usize), domain: Domain) -> ComplexVolume {
    ComplexVolume::from_fn(shape, domain, |_, _, _| {
        Complex32::new(rng.next_uniform(-1.0, 1.0) as f32, rng.next_uniform(-1.0, 1.0) as f32)
    })
}

fn c64(c: Complex32) -> Complex64 {
    Complex64::new(c.re as f64, c.im as f64)
}

fn transform_suite() -> Check {
    let mut rng = SplitMix64::new(11);
    let (mut round_trip, mut parseval, mut linear, mut symmetry) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..100 {
        let shape = [(2, 16, 16), (3, 32, 24), (1, 15, 17), (2, 64, 64)][i % 4];
        let x = random_volume(&mut rng, shape, Domain::Image);
        let y = random_volume(&mut rng, shape, Domain::Image);
        let kx = x.fft2c().map_err(err)?;
        round_trip = round_trip.max(kx.ifft2c().map_err(err)?.max_abs_diff(&x) as f64);
        parseval = parseval.max((kx.energy() - x.energy()).abs() / x.energy());

        let (a, b) = (Complex32::new(0.7, -1.3), Complex32::new(-0.4, 0.25));
        let combo = ComplexVolume::from_fn(shape, Domain::Image, |z, r, c| a * x.get(z, r, c) + b * y.get(z, r, c));
        let ky = y.fft2c().map_err(err)?;
        let kc = combo.fft2c().map_err(err)?;
        for (j, v) in kc.data().iter().enumerate() {
            let expect = c64(a) * c64(kx.data()[j]) + c64(b) * c64(ky.data()[j]);
            linear = linear.max((c64(*v) - expect).norm());
        }

        // real images have Hermitian spectra about the DC bin (even sizes)
        let (d, h, w) = shape;
        if h % 2 == 0 && w % 2 == 0 {
            let real = x.map(|c| Complex32::new(c.re, 0.0));
            let k = real.fft2c().map_err(err)?;
            for z in 0..d {
                for r in 1..h {
                    for c in 1..w {
                        let mirror = k.get(z, h - r, w - c).conj();
                        symmetry = symmetry.max((k.get(z, r, c) - mirror).norm() as f64);
                    }
                }
            }
        }
    }
    ensure(round_trip < 1e-6, format!("round-trip error {round_trip:e}"))?;
    ensure(parseval < 1e-5, format!("Parseval relative error {parseval:e}"))?;
    ensure(linear < 1e-5, format!("linearity error {linear:e}"))?;
    ensure(symmetry < 1e-5, format!("conjugate symmetry error {symmetry:e}"))?;
    Ok(format!(
        "100 volumes: round-trip {round_trip:.1e}, Parseval {parseval:.1e}, linearity {linear:.1e}, symmetry {symmetry:.1e}"
    ))
}

/// Digest of every mask the mask suite draws, for cross-process comparison.
fn mask_digest() -> String {
    let schedule = AccelSchedule::standard();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &(r, cf) in &schedule.entries {
        for p in 0..20 {
            for z in [0usize, 16, 32] {
                let m = random_mask(320, r as f64, cf, derive_seed(r, p, z));
                for &k in &m.keep {
                    h = (h ^ k as u64).wrapping_mul(0x100_0000_01b3);
                }
            }
        }
    }
    format!("{h:016x}")
}

fn mask_suite() -> Check {
    let schedule = AccelSchedule::standard();
    let width = 320;
    let mut worst: f64 = 0.0;
    for &(r, cf) in &schedule.entries {
        let mut kept = 0.0;
        for s in 0..1000u64 {
            let m = random_mask(width, r as f64, cf, s * 7919 + r as u64);
            ensure(m.keep[m.center_range()].iter().all(|&k| k), format!("R={r}: a center column was dropped"))?;
            let n_center = m.center_range().len();
            ensure(
                n_center == kseg::sampling::center_columns(width, cf),
                format!("R={r}: center block has {n_center} columns"),
            )?;
            kept += m.kept_fraction();
        }
        let mean = kept / 1000.0;
        let rel = (mean - 1.0 / r as f64).abs() * r as f64;
        worst = worst.max(rel);
        ensure(rel <= 0.10, format!("R={r}: mean kept fraction {mean:.4} vs {:.4}", 1.0 / r as f64))?;
    }
    let here = mask_digest();
    let exe = std::env::current_exe().map_err(|e| e.to_string())?;
    let mut others = Vec::new();
    for _ in 0..2 {
        let out = Command::new(&exe)
            .env("KSEG_ACCEPTANCE_CHILD", "mask-digest")
            .output()
            .map_err(|e| e.to_string())?;
        others.push(String::from_utf8_lossy(&out.stdout).trim().to_string());
    }
    ensure(
        others.iter().all(|o| *o == here),
        format!("mask digests differ across processes: {here} vs {others:?}"),
    )?;
    Ok(format!(
        "{} schedule entries x 1000 masks, worst kept-fraction deviation {:.1}%; digest {here} identical in 3 processes",
        schedule.entries.len(),
        worst * 100.0
    ))
}

fn noise_suite() -> Check {
    let mut rng = SplitMix64::new(5);
    let k = random_volume(&mut rng, (16, 256, 256), Domain::KSpace);
    let signal = k.mean_power();
    let mut lines = Vec::new();
    for (i, snr) in [20.0, 0.0, -10.0].into_iter().enumerate() {
        let noisy = add_noise(&k, snr, 100 + i as u64).map_err(err)?;
        let n = noisy.sub(&k).map_err(err)?;
        let mut p = 0.0;
        let (mut re2, mut im2, mut reim) = (0.0, 0.0, 0.0);
        let mut pseudo = Complex64::new(0.0, 0.0);
        for v in n.data() {
            let v = c64(*v);
            p += v.norm_sqr();
            re2 += v.re * v.re;
            im2 += v.im * v.im;
            reim += v.re * v.im;
            pseudo += v * v;
        }
        let count = n.len() as f64;
        let measured = 10.0 * (signal / (p / count)).log10();
        ensure((measured - snr).abs() <= 0.2, format!("target {snr} dB measured {measured:.3} dB"))?;
        // circular symmetry: equal Re/Im power, uncorrelated, vanishing pseudo-variance
        let balance = (re2 - im2).abs() / p;
        let corr = reim.abs() / p;
        let pv = pseudo.norm() / p;
        ensure(balance < 0.01 && corr < 0.01 && pv < 0.01, format!("noise at {snr} dB is not circular"))?;
        lines.push(format!("{snr} dB -> {measured:.3}"));
    }
    Ok(format!("{} samples each: {}", k.len(), lines.join(", ")))
}

fn tiny_dims(cfg: &ModelConfig) -> [usize; 3] {
    let div = cfg.divisor();
    std::array::from_fn(|a| div[a] * 8usize.div_ceil(div[a]))
}

fn random_patch(rng: &mut SplitMix64, dims: [usize; 3]) -> ComplexVolume {
    random_volume(rng, (dims[0], dims[1], dims[2]), Domain::KSpace)
}

fn blob_target(dims: [usize; 3]) -> Vec<u8> {
    let [d, h, w] = dims;
    let mut t = vec![0u8; d * h * w];
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let r2 = (z as f64 - d as f64 / 2.0).powi(2) + (y as f64 - h as f64 / 2.0).powi(2) + (x as f64 - w as f64 / 3.0).powi(2);
                t[(z * h + y) * w + x] = (r2 < 6.0) as u8;
            }
        }
    }
    t
}

fn max_prob_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn model_suite() -> Check {
    let mut rng = SplitMix64::new(21);
    let mut notes = Vec::new();
    for v in ModelVariant::ALL {
        let cfg = ModelConfig::tiny(v);
        let model = build_model::<f64>(&cfg, 3).map_err(err)?;
        let dims = tiny_dims(&cfg);
        let k = random_patch(&mut rng, dims);
        let input = patch_tensor::<f64>(&k, 0, dims[0]).map_err(err)?;
        let probs = model.forward(&input).map_err(err)?;
        ensure(probs.shape == [2, dims[0], dims[1], dims[2]], format!("{v}: output shape {:?}", probs.shape))?;
        let n = probs.voxels();
        let worst = (0..n).map(|i| (probs.data[i] + probs.data[n + i] - 1.0).abs()).fold(0.0, f64::max);
        ensure(worst < 1e-9 && probs.data.iter().all(|p| (0.0..=1.0).contains(p)), format!("{v}: not a softmax"))?;
        let bad = Tensor::<f64>::zeros([2, dims[0] + 1, dims[1], dims[2]]);
        ensure(
            matches!(model.forward(&bad), Err(Error::Shape(_))),
            format!("{v}: indivisible patch accepted"),
        )?;
    }

    // global phase
    let rot = Complex32::from_polar(1.0, 1.1);
    let mut phase = Vec::new();
    for v in [ModelVariant::ImageMagnitude, ModelVariant::ImageComplex] {
        let cfg = ModelConfig::tiny(v);
        let model = build_model::<f64>(&cfg, 4).map_err(err)?;
        let dims = tiny_dims(&cfg);
        let k = random_patch(&mut rng, dims);
        let a = model.forward(&patch_tensor(&k, 0, dims[0]).map_err(err)?).map_err(err)?;
        let b = model.forward(&patch_tensor(&k.map(|c| c * rot), 0, dims[0]).map_err(err)?).map_err(err)?;
        phase.push(max_prob_diff(&a, &b));
    }
    ensure(phase[0] < 1e-5, format!("magnitude model changed by {:.1e} under a global phase", phase[0]))?;
    ensure(phase[1] > 1e-4, format!("complex model unchanged ({:.1e}) under a global phase", phase[1]))?;
    notes.push(format!("phase: magnitude {:.1e}, complex {:.1e}", phase[0], phase[1]));

    // gradients through the fixed iFFT bridge
    let tcfg = TrainConfig::default();
    for v in [ModelVariant::HybridKspaceToImage, ModelVariant::NativeKspace] {
        let cfg = ModelConfig::tiny(v);
        let mut model = build_model::<f64>(&cfg, 5).map_err(err)?;
        let dims = tiny_dims(&cfg);
        let input = patch_tensor::<f64>(&random_patch(&mut rng, dims), 0, dims[0]).map_err(err)?;
        let target = blob_target(dims);
        let (_, grads) = sample_loss_grad(&model, input.clone(), &target, &tcfg).map_err(err)?;
        // parameters upstream of the bridge: the first tensors belong to the k-space network
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for pi in [0usize, 1, 2, 4] {
            let len = model.params.params[pi].value.len();
            for j in [0, len / 3, len - 1] {
                let orig = model.params.params[pi].value[j];
                let h = 1e-5 * orig.abs().max(1.0);
                model.params.params[pi].value[j] = orig + h;
                let lp = sample_loss_grad(&model, input.clone(), &target, &tcfg).map_err(err)?.0.total;
                model.params.params[pi].value[j] = orig - h;
                let lm = sample_loss_grad(&model, input.clone(), &target, &tcfg).map_err(err)?.0.total;
                model.params.params[pi].value[j] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let an = grads[pi][j];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
        ensure(worst < 1e-3, format!("{v}: worst relative gradient error {worst:.2e}"))?;
        notes.push(format!("{v} FD {checked} entries worst {worst:.1e}"));
    }
    Ok(notes.join("; "))
}

fn complexity_check() -> Check {
    let hybrid = complexity_report(&ModelConfig::full(ModelVariant::HybridKspaceToImage)).map_err(err)?;
    let mut lines = vec![format!("hybrid {} params {:.1} GMACs", hybrid.parameter_count, hybrid.mac_count as f64 / 1e9)];
    let mut ratio_base = 0;
    for v in [ModelVariant::NativeKspace, ModelVariant::ImageMagnitude, ModelVariant::ImageComplex] {
        let r = complexity_report(&ModelConfig::full(v)).map_err(err)?;
        let dev = (r.parameter_count as f64 / 2.67e6 - 1.0).abs();
        ensure(dev <= 0.15, format!("{v}: {} params", r.parameter_count))?;
        if v == ModelVariant::ImageMagnitude {
            ratio_base = r.mac_count;
        }
        lines.push(format!("{v} {}", r.parameter_count));
    }
    ensure(
        (hybrid.parameter_count as f64 / 2.25e6 - 1.0).abs() <= 0.15,
        format!("hybrid: {} params", hybrid.parameter_count),
    )?;
    let ratio = hybrid.mac_count as f64 / ratio_base as f64;
    ensure((6.0..=12.0).contains(&ratio), format!("MAC ratio {ratio:.2}"))?;
    lines.push(format!("MAC ratio {ratio:.2} at {:?}", REFERENCE_INPUT));
    Ok(lines.join(", "))
}

fn overfit_variant(v: ModelVariant, exam: &kseg::phantom::Exam) -> Result<(usize, Vec<String>), String> {
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        augmentation_probability: 0.0,
        ..TrainConfig::desk()
    };
    let mut passes = 0;
    let mut notes = Vec::new();
    for seed in 0..3u64 {
        let mut model = build_model::<f32>(&ModelConfig::desk(v), seed).map_err(err)?;
        let r = overfit(&mut model, exam, &cfg, 300, 0.95, 10).map_err(err)?;
        passes += r.reached as usize;
        notes.push(format!("{:.3}@{}", r.dice, r.steps));
        // majority already decided
        if passes == 2 || seed + 1 - passes as u64 == 2 {
            break;
        }
    }
    Ok((passes, notes))
}

fn training_suite() -> Check {
    let cfg = TrainConfig::default();
    // loss decomposition on the native model, where all three terms are active
    let mcfg = ModelConfig::tiny(ModelVariant::NativeKspace);
    let model = build_model::<f64>(&mcfg, 1).map_err(err)?;
    let dims = tiny_dims(&mcfg);
    let mut rng = SplitMix64::new(8);
    let input = patch_tensor::<f64>(&random_patch(&mut rng, dims), 0, dims[0]).map_err(err)?;
    let target = blob_target(dims);
    let (loss, _) = sample_loss_grad(&model, input.clone(), &target, &cfg).map_err(err)?;
    let mut g = Graph::new(&model.params);
    let nodes = model.forward_graph(&mut g, input).map_err(err)?;
    let (seg, _) = dice_focal_loss(g.value(nodes.probs), &target, &cfg).map_err(err)?;
    let (aux, _) = kspace_mse_aux(ModelVariant::NativeKspace, g.value(nodes.kspace.unwrap()), &target).map_err(err)?;
    let recomposed = cfg.dice_weight * seg.dice + cfg.focal_weight * seg.focal + cfg.aux_kspace_mse_weight * aux;
    let gap = (loss.total - recomposed).abs();
    ensure(gap < 1e-12 && loss.aux == aux, format!("loss terms do not add up (gap {gap:e})"))?;
    ensure(
        (loss.weighted_terms(&cfg).iter().sum::<f64>() - loss.total).abs() < 1e-12,
        "weighted terms do not sum to the total",
    )?;

    // clipping on real and synthetic gradients
    let mut big: Vec<Vec<f64>> = (0..5).map(|i| (0..100).map(|j| ((i * 100 + j) as f64).sin() * 50.0).collect()).collect();
    let (pre, post) = clip_grad_norm(&mut big, cfg.grad_clip_norm);
    ensure(pre > 1.0 && post <= 1.0, format!("clip left norm {post}"))?;
    let cohort = generate_cohort(&PhantomSpec::desk(), 3, 77).map_err(err)?;
    let mut m = build_model::<f32>(&ModelConfig::desk(ModelVariant::ImageMagnitude), 2).map_err(err)?;
    let short = TrainConfig {
        max_epochs: 2,
        steps_per_epoch: Some(3),
        learning_rate: 3e-2,
        ..TrainConfig::desk()
    };
    let h = train(&mut m, &cohort[..2], &cohort[2..], &short, &mut |_| {}).map_err(err)?;
    let max_post = h.epochs.iter().map(|e| e.max_clipped_norm).fold(0.0, f64::max);
    ensure(max_post <= 1.0 + 1e-6, format!("post-clip norm {max_post}"))?;

    let (lr0, lr_end) = (cosine_lr(0, cfg.max_epochs, cfg.learning_rate, cfg.lr_min), cosine_lr(cfg.max_epochs, cfg.max_epochs, cfg.learning_rate, cfg.lr_min));
    ensure((lr0 - 3e-4).abs() < 1e-15 && (lr_end - 1e-6).abs() < 1e-15, format!("schedule {lr0} -> {lr_end}"))?;

    let exam = generate_exam(&PhantomSpec::desk(), 0, 7).map_err(err)?;
    let mut lines = vec![format!("decomposition gap {gap:.1e}, post-clip max {max_post:.3}, lr {lr0:e} -> {lr_end:e}")];
    let mut failed = Vec::new();
    for v in ModelVariant::ALL {
        let (passes, notes) = overfit_variant(v, &exam)?;
        if passes < 2 {
            failed.push(v.to_string());
        }
        lines.push(format!("{} overfit {} [{}]", v.short_name(), passes, notes.join(" ")));
    }
    ensure(failed.is_empty(), format!("overfit majority failed for {failed:?}: {}", lines.join("; ")))?;
    Ok(lines.join("; "))
}

fn brute_force_vote(depth: usize, plane: usize, windows: &[(usize, Vec<u8>)]) -> Vec<u8> {
    (0..depth * plane)
        .map(|i| {
            let z = i / plane;
            let covering: Vec<u8> = windows
                .iter()
                .filter(|(z0, p)| z >= *z0 && z < z0 + p.len() / plane)
                .map(|(z0, p)| p[i - z0 * plane])
                .collect();
            let votes = covering.iter().filter(|&&v| v != 0).count();
            (votes * 2 > covering.len()) as u8
        })
        .collect()
}

fn tiny_sweep(models: &[&Model<f32>], cohort: &[PreparedExam], cfg: &EvalConfig, workers: usize) -> Result<Vec<u8>, String> {
    let conditions: Vec<Condition> = acceleration_conditions(cfg).into_iter().filter(|c| c.value() <= 8.0).collect();
    let mut noise = vec![Condition::SnrDb(0.0)];
    let mut all = conditions;
    all.append(&mut noise);
    let table = run_sweep(models, cohort, &all, cfg, None, workers, &mut |_| Ok(())).map_err(err)?;
    let mut out = Vec::new();
    table.write_csv(&mut out).map_err(err)?;
    Ok(out)
}

fn inference_suite() -> Check {
    let mut rng = SplitMix64::new(31);
    let mut equal = 0;
    for _ in 0..100 {
        let patch = rng.next_range(1, 8) as usize;
        let stride = rng.next_range(1, patch as u64) as usize;
        let depth = patch + rng.next_range(0, 20) as usize;
        let plane = rng.next_range(1, 6) as usize;
        let starts = window_starts(depth, patch, stride).map_err(err)?;
        let windows: Vec<(usize, Vec<u8>)> = starts
            .iter()
            .map(|&z| (z, (0..patch * plane).map(|_| (rng.next_f64() < 0.5) as u8).collect()))
            .collect();
        let mut tally = VoteTally::new(depth * plane);
        for (z, p) in &windows {
            tally.add(z * plane, p);
        }
        ensure(
            tally.finish() == brute_force_vote(depth, plane, &windows),
            format!("vote mismatch for depth {depth} patch {patch} stride {stride}"),
        )?;
        equal += 1;
    }

    let cohort: Vec<PreparedExam> = generate_cohort(&PhantomSpec::desk(), 3, 9)
        .map_err(err)?
        .iter()
        .map(|e| prepare_exam(e, Timepoint::Post2))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let models: Vec<Model<f32>> = [ModelVariant::ImageMagnitude, ModelVariant::HybridKspaceToImage]
        .iter()
        .map(|&v| build_model(&ModelConfig::tiny(v), 1))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let refs: Vec<&Model<f32>> = models.iter().collect();
    let cfg = EvalConfig::default();
    let a = tiny_sweep(&refs, &cohort, &cfg, 1)?;
    let b = tiny_sweep(&refs, &cohort, &cfg, 1)?;
    let c = tiny_sweep(&refs, &cohort, &cfg, 3)?;
    ensure(a == b && a == c, "sweep reruns differ")?;
    let rows = a.iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(format!("{equal}/100 overlap patterns match the brute-force tally; sweep of {rows} records byte-identical across 3 reruns"))
}

/// Exact two-sided p by enumerating all sign assignments.
fn enumeration_p(d: &[f64]) -> f64 {
    let d: Vec<f64> = d.iter().cloned().filter(|&x| x != 0.0).collect();
    let n = d.len();
    let abs: Vec<f64> = d.iter().map(|x| x.abs()).collect();
    let ranks: Vec<f64> = abs
        .iter()
        .map(|a| {
            let less = abs.iter().filter(|b| *b < a).count() as f64;
            let eq = abs.iter().filter(|b| *b == a).count() as f64;
            less + (eq + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = ranks.iter().zip(&d).filter(|(_, &x)| x > 0.0).map(|(r, _)| r).sum();
    let (mut le, mut ge) = (0u64, 0u64);
    for mask in 0u64..(1 << n) {
        let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        le += (s <= observed + 1e-9) as u64;
        ge += (s >= observed - 1e-9) as u64;
    }
    let total = (1u64 << n) as f64;
    (2.0 * (le as f64 / total).min(ge as f64 / total)).min(1.0)
}

fn statistics_suite() -> Check {
    let mut rng = SplitMix64::new(41);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n in 1..=12usize {
        for rep in 0..8 {
            // half the cases use coarse values so ties and zeros occur
            let coarse = rep % 2 == 1;
            let a: Vec<f64> = (0..n).map(|_| rng.next_uniform(0.0, 1.0)).collect();
            let b: Vec<f64> = a
                .iter()
                .map(|x| {
                    let d = rng.next_uniform(-0.6, 0.8);
                    x - if coarse { (d * 4.0).round() / 4.0 } else { d }
                })
                .collect();
            let diffs: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
            let p = wilcoxon_paired(&a, &b).map_err(err)?.p;
            let oracle = enumeration_p(&diffs);
            worst = worst.max((p - oracle).abs());
            let sym = wilcoxon_paired(&b, &a).map_err(err)?.p;
            ensure((p - sym).abs() < 1e-12, format!("asymmetric p at n={n}"))?;
            cases += 1;
        }
    }
    ensure(worst < 1e-12, format!("exact p differs from enumeration by {worst:e}"))?;
    let p5 = wilcoxon_paired(&[0.9, 0.8, 0.7, 0.6, 0.5], &[0.1, 0.15, 0.25, 0.3, 0.45]).map_err(err)?.p;
    ensure((p5 - 0.0625).abs() < 1e-15, format!("n=5 all-positive p = {p5}"))?;
    let holm = holm_adjust(&[0.01, 0.04, 0.03]).map_err(err)?;
    ensure(
        holm.iter().zip([0.03, 0.06, 0.06]).all(|(a, b)| (a - b).abs() < 1e-12),
        format!("Holm gave {holm:?}"),
    )?;

    let mut covered = 0;
    for sim in 0..500u64 {
        let mut g = SplitMix64::new(10_000 + sim);
        // n = 100: the percentile interval's small-sample undercoverage is
        // about 0.3 points here, against 0.7 at n = 50
        let values: Vec<f64> = (0..50)
            .flat_map(|_| {
                let (x, y) = g.next_gaussian_pair();
                [2.0 + x, 2.0 + y]
            })
            .collect();
        let (lo, hi) = bootstrap_ci(&values, 10_000, 0.05, sim).map_err(err)?;
        covered += (lo <= 2.0 && 2.0 <= hi) as usize;
    }
    let coverage = covered as f64 / 500.0;
    ensure((0.93..=0.97).contains(&coverage), format!("bootstrap coverage {coverage:.3}"))?;
    Ok(format!(
        "{cases} exact cases n<=12 within {worst:.0e} of enumeration; n=5 p={p5}; Holm {holm:?}; bootstrap coverage {:.1}%",
        coverage * 100.0
    ))
}

#[derive(Default)]
struct TrendSeed {
    dice16: BTreeMap<ModelVariant, f64>,
    fail32: BTreeMap<ModelVariant, f64>,
    /// Magnitude model mean Dice at R = 1 and R = 32.
    magnitude_r1_r32: (f64, f64),
}

fn trend_seed(seed: u64) -> Result<TrendSeed, String> {
    let cohort = generate_cohort(&PhantomSpec::desk(), 50, 1000 + seed).map_err(err)?;
    // 40 training-side exams (32 fit, 8 early-stopping validation), 10 test
    let (train_set, rest) = cohort.split_at(32);
    let (val_set, test_set) = rest.split_at(8);
    let test: Vec<PreparedExam> = test_set
        .iter()
        .map(|e| prepare_exam(e, Timepoint::Post2))
        .filter(|e| e.as_ref().map_or(true, |e| e.is_lesion_positive()))
        .collect::<Result<_, _>>()
        .map_err(err)?;
    let ecfg = EvalConfig::default();
    let cf = |r: u32| ecfg.schedule.center_fraction(r).expect("schedule entry");
    let mut out = TrendSeed::default();
    for v in ModelVariant::ALL {
        let t = Instant::now();
        let cfg = TrainConfig { seed, ..TrainConfig::desk() };
        let mut model = build_model::<f32>(&ModelConfig::desk(v), seed).map_err(err)?;
        let h = train(&mut model, train_set, val_set, &cfg, &mut |_| {}).map_err(err)?;
        let score = |r: u32| -> Result<Vec<f64>, String> {
            test.iter()
                .map(|e| evaluate_condition(&model, e, Condition::Acceleration(r, cf(r)), &ecfg).map_err(err))
                .collect()
        };
        let d16 = score(16)?;
        let d32 = score(32)?;
        let mean16 = d16.iter().sum::<f64>() / d16.len() as f64;
        let f32_rate = failure_rate(&d32).map_err(err)?;
        eprintln!(
            "    seed {seed} {:<9} val {:.3} | R16 dice {mean16:.3} | R32 failures {f32_rate:.2} | {:.0}s",
            v.short_name(),
            h.best_val_dice.unwrap_or(f64::NAN),
            t.elapsed().as_secs_f64()
        );
        if v == ModelVariant::ImageMagnitude {
            let d1 = score(1)?;
            out.magnitude_r1_r32 = (d1.iter().sum::<f64>() / d1.len() as f64, d32.iter().sum::<f64>() / d32.len() as f64);
        }
        out.dice16.insert(v, mean16);
        out.fail32.insert(v, f32_rate);
    }
    Ok(out)
}

fn trend_suite() -> Check {
    let (hy, mag) = (ModelVariant::HybridKspaceToImage, ModelVariant::ImageMagnitude);
    let mut passes = 0;
    let mut lines = Vec::new();
    for seed in 0..3u64 {
        let r = trend_seed(seed)?;
        let ok = r.dice16[&hy] > r.dice16[&mag] && r.fail32[&mag] >= r.fail32[&hy];
        passes += ok as usize;
        let (r1, r32) = r.magnitude_r1_r32;
        ensure(r32 <= r1, format!("seed {seed}: magnitude Dice rose from {r1:.3} at R1 to {r32:.3} at R32"))?;
        lines.push(format!(
            "seed {seed} {}: R16 dice hybrid {:.3} vs magnitude {:.3}, R32 failures magnitude {:.2} vs hybrid {:.2}",
            if ok { "ok" } else { "reversed" },
            r.dice16[&hy],
            r.dice16[&mag],
            r.fail32[&mag],
            r.fail32[&hy]
        ));
        if passes == 2 || seed as usize + 1 - passes == 2 {
            break;
        }
    }
    ensure(passes >= 2, format!("{passes} of 3 seeds: {}", lines.join("; ")))?;
    Ok(format!("{passes} seeds agree: {}", lines.join("; ")))
}

#[allow(clippy::needless_range_loop)]
fn feature_suite() -> Check {
    let mut k = ComplexVolume::zeros((2, 32, 32), Domain::KSpace);
    k.set(0, 16, 16, Complex32::new(1.0, 0.0));
    k.set(1, 16, 16, Complex32::new(0.0, 2.0));
    let p = radial_energy_profile(&k, 8).map_err(err)?;
    ensure(p.energy[1..].iter().all(|&e| e == 0.0) && p.energy[0] > 0.0, "DC impulse leaked out of bin 0")?;

    let mut rng = SplitMix64::new(51);
    let white = ComplexVolume::from_fn((32, 128, 128), Domain::KSpace, |_, _, _| {
        let (a, b) = rng.next_gaussian_pair();
        Complex32::new(a as f32, b as f32)
    });
    let wp = radial_energy_profile(&white, 8).map_err(err)?;
    let filled: Vec<f64> = wp.energy.iter().zip(&wp.counts).filter(|(_, &c)| c > 0).map(|(e, _)| *e).collect();
    let mean = filled.iter().sum::<f64>() / filled.len() as f64;
    let spread = filled.iter().map(|e| (e / mean - 1.0).abs()).fold(0.0, f64::max);
    ensure(spread < 0.10, format!("white-noise bins deviate by {:.1}%", spread * 100.0))?;
    let completeness = (wp.total_energy() - white.energy()).abs() / white.energy();
    ensure(completeness < 1e-5, format!("profile misses {completeness:e} of the energy"))?;

    let base = random_volume(&mut rng, (2, 16, 16), Domain::Image);
    let other = random_volume(&mut rng, (2, 16, 16), Domain::Image);
    let rot = Complex32::from_polar(1.0, std::f32::consts::FRAC_PI_3);
    let removal = coherent_sum(&[base.clone(), base.map(|c| c * rot)]).map_err(err)?.max_abs_diff(&base.scale(2.0));
    ensure(removal < 1e-5, format!("rotation not removed ({removal:e})"))?;
    let s0 = coherent_sum(&[base.clone(), other.clone()]).map_err(err)?;
    let s1 = coherent_sum(&[base.clone(), other.map(|c| c * Complex32::from_polar(1.0, 2.3))]).map_err(err)?;
    let invariance = s0.max_abs_diff(&s1);
    ensure(invariance < 1e-5, format!("coherent sum not phase invariant ({invariance:e})"))?;
    // alignment maximizes the summed energy over the second channel's phase
    let aligned = coherent_sum(&[base.clone(), other.clone()]).map_err(err)?.energy();
    let phi = relative_phase(&other, &base);
    let best_grid = (0..360)
        .map(|i| {
            let r = Complex32::from_polar(1.0, i as f32 * std::f32::consts::PI / 180.0 - phi as f32);
            ComplexVolume::from_fn(base.shape(), Domain::Image, |z, y, x| base.get(z, y, x) + other.get(z, y, x) * r).energy()
        })
        .fold(0.0, f64::max);
    ensure(aligned >= best_grid * (1.0 - 1e-6), "alignment is not energy maximizing")?;

    // gradient weights against central differences at the bridge
    let cfg = ModelConfig::tiny(ModelVariant::HybridKspaceToImage);
    let model = build_model::<f64>(&cfg, 6).map_err(err)?;
    let dims = tiny_dims(&cfg);
    let patch = patch_tensor::<f64>(&random_patch(&mut rng, dims), 0, dims[0]).map_err(err)?;
    let weights = bridge_gradient_weights(&model, &patch).map_err(err)?;
    let bridge: Vec<ComplexVolume> = bridge_channels(&model, &patch).map_err(err)?;
    let mut g = Graph::new(&model.params);
    let nodes = model.forward_graph(&mut g, patch.clone()).map_err(err)?;
    let base_bridge = g.value(nodes.bridge.unwrap()).clone();
    ensure(bridge.len() == weights.len(), "channel count mismatch")?;
    let lesion_sum = |t: Tensor<f64>| -> Result<f64, String> {
        let mut g = Graph::new(&model.params);
        let (_, logits) = model.image_stage_graph(&mut g, t).map_err(err)?;
        Ok(g.value(logits).channel(LESION_CLASS).iter().sum())
    };
    let f = weights.len();
    let v = base_bridge.voxels();
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for c in 0..f {
        let mut acc = 0.0;
        for i in 0..v {
            let mut parts = [0.0; 2];
            for (p, ch) in [c, c + f].into_iter().enumerate() {
                let mut plus = base_bridge.clone();
                plus.data[ch * v + i] += h;
                let mut minus = base_bridge.clone();
                minus.data[ch * v + i] -= h;
                parts[p] = (lesion_sum(plus)? - lesion_sum(minus)?) / (2.0 * h);
            }
            acc += (parts[0] * parts[0] + parts[1] * parts[1]).sqrt();
        }
        let fd = acc / v as f64;
        worst = worst.max((fd - weights[c]).abs() / fd.abs().max(1e-12));
    }
    ensure(worst < 5e-2, format!("gradient weights deviate from finite differences by {worst:.2e}"))?;
    Ok(format!(
        "DC impulse confined; white-noise bins within {:.1}%; rotation residual {removal:.1e}; phase invariance {invariance:.1e}; gradient weights vs FD {worst:.1e}",
        spread * 100.0
    ))
}

fn main() -> ExitCode {
    if std::env::var("KSEG_ACCEPTANCE_CHILD").as_deref() == Ok("mask-digest") {
        println!("{}", mask_digest());
        return ExitCode::SUCCESS;
    }
    let only: Option<Vec<usize>> = std::env::var("KSEG_ACCEPTANCE")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let suites: [Suite; 10] = [
        (1, "transform suite", transform_suite),
        (2, "mask suite", mask_suite),
        (3, "noise suite", noise_suite),
        (4, "model suite", model_suite),
        (5, "complexity", complexity_check),
        (6, "training suite", training_suite),
        (7, "inference suite", inference_suite),
        (8, "statistics suite", statistics_suite),
        (9, "directional robustness trend", trend_suite),
        (10, "feature suite", feature_suite),
    ];
    let mut failures = 0;
    for (n, name, run) in suites {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}, {secs:.1}s): {detail}"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {n} ({name}, {secs:.1}s): {detail}");
            }
        }
    }
    if failures > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
