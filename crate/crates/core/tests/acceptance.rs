//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Criteria run one after another so that their wall
//! clock budgets are measured without contention.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use common::*;
use mmsynth::config::RunConfig;
use mmsynth::diffusion::{
    forward_sample, forward_step, predict_z0, refine_latent, to_f64_vec, RefineMode, ScheduleConfig,
};
use mmsynth::evaluation::{aggregate, coherence_metric, evaluate_case, parse_table_csv, ssim_3d, EvalReport, DIFF_DIR};
use mmsynth::inference::MmgSynthesizer;
use mmsynth::io::{list_cases, read_case, read_json, read_volume, Split};
use mmsynth::losses::{cen_total_loss, latent_consistency_loss, mmg_total_loss, scalar, ssim, ssim_loss, weighted_image_loss, LossWeights};
use mmsynth::networks::{no_grad, CenArchConfig, MmgArchConfig};
use mmsynth::phantom::{generate_phantom_case, PhantomSpec};
use mmsynth::pipeline::load_cases;
use mmsynth::preprocessing::{mask_modality, slice_at};
use mmsynth::training::{
    load_cen_model, load_mmg_model, slice_batch, CenTrainConfig, CenTrainer, MmgTrainConfig, MmgTrainer, SubvolumePair,
};
use mmsynth::types::{Modality, Volume};
use mmsynth::volumetric::{extract_subvolume, plan_windows, plan_windows_with, refine_volume, Blend};
use ndarray::{Array3, ArrayView3};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Check = std::result::Result<String, String>;

/// Writes to the process stdout directly, so the report shows up even when
/// the test harness captures output.
fn report(line: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn run(id: usize, name: &'static str, budget_secs: f64, f: impl FnOnce() -> Check) -> Outcome {
    let started = Instant::now();
    let result = f();
    let secs = started.elapsed().as_secs_f64();
    let (mut pass, mut detail) = match result {
        Ok(d) => (true, d),
        Err(e) => (false, e),
    };
    if secs > budget_secs {
        pass = false;
        detail = format!("{detail}; over budget");
    }
    let line = format!(
        "criterion {id} {name}: {} ({detail}) [{secs:.1}s of {budget_secs:.0}s]",
        if pass { "PASS" } else { "FAIL" }
    );
    report(&line);
    Outcome { id, name, pass, detail }
}

// ---------------------------------------------------------------- criterion 1

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (mean, x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n)
}

fn norm(t: &Tensor) -> f64 {
    to_f64_vec(t).unwrap().iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn diffusion_math() -> Check {
    let s = ok(ScheduleConfig::default().build())?;
    ensure(ok(s.beta(1))? == 1e-4 && ok(s.beta(1000))? == 2e-2, "schedule endpoints")?;
    for t in 2..=1000 {
        ensure(ok(s.alpha_bar(t))? < ok(s.alpha_bar(t - 1))?, format!("alpha_bar not decreasing at {t}"))?;
    }

    let n = 100_000;
    let z0 = ok(Tensor::ones((1, n), DType::F64, &Device::Cpu))?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut z = z0.clone();
    let mut worst: f64 = 0.0;
    for t in 1..=1000 {
        z = ok(forward_step(&z, t, &s, &mut rng))?;
        if [1, 10, 500, 1000].contains(&t) {
            let (mc, vc) = moments(&ok(to_f64_vec(&z))?);
            let (zt, _) = ok(forward_sample(&z0, &[t], &s, &mut rng))?;
            let (mf, vf) = moments(&ok(to_f64_vec(&zt))?);
            let dm = (mc - mf).abs() / mf.abs().max(vf.sqrt());
            let dv = (vc - vf).abs() / vf;
            worst = worst.max(dm).max(dv);
            ensure(dm < 0.02 && dv < 0.02, format!("t={t}: mean {mc} vs {mf}, var {vc} vs {vf}"))?;
        }
    }

    let z0 = ok(Tensor::randn(0f64, 1.0, (2, 4, 8, 8), &Device::Cpu))?;
    let mut inverse: f64 = 0.0;
    for t in [1, 10, 500, 1000] {
        let (zt, eps) = ok(forward_sample(&z0, &[t], &s, &mut rng))?;
        let back = ok(predict_z0(&zt, &eps, &[t], &s))?;
        inverse = inverse.max(norm(&ok(back - &z0)?) / norm(&z0));
    }
    ensure(inverse <= 1e-5, format!("predict_z0 inverse error {inverse}"))?;

    let oracle = |zt: &Tensor, ts: &[usize]| -> mmsynth::Result<Tensor> {
        let ab = s.alpha_bar(ts[0])?;
        Ok(((zt - (&z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    };
    let out = ok(refine_latent(&z0, &oracle, &s, 500, RefineMode::Chain, &mut rng))?;
    let round = norm(&ok(out - &z0)?) / norm(&z0);
    ensure(round < 0.05, format!("oracle round trip error {round}"))?;
    Ok(format!("moments within {:.2}%, inverse {inverse:.1e}, round trip {:.2}%", worst * 100.0, round * 100.0))
}

// ---------------------------------------------------------------- criterion 2

fn loss_suite() -> Check {
    let mut r = rng(2);
    let v = |t: Tensor| scalar(&t).unwrap();
    let x = tensor(uniform(&mut r, 4 * 64, 0.0, 1.0), &[1, 4, 8, 8]);
    let s = tensor((0..64).map(|i| (i % 3 == 0) as u8 as f64).collect(), &[1, 8, 8]);
    let z = tensor(uniform(&mut r, 32, -1.0, 1.0), &[1, 2, 4, 4]);
    let vol = tensor(uniform(&mut r, 512, 0.0, 1.0), &[1, 1, 8, 8, 8]);
    ensure(v(ok(weighted_image_loss(&x, &x, &s, 4.0))?) == 0.0, "image loss at perfect reconstruction")?;
    ensure(v(ok(latent_consistency_loss(&z, &z, 2.0))?) == 0.0, "latent loss at z~ = z")?;
    ensure(v(ok(ssim_loss(&x, &x))?).abs() < 1e-12, "ssim loss at perfect reconstruction")?;
    ensure(v(ok(mmg_total_loss(&x, &x, &s, &z, &z, &LossWeights::default()))?.total).abs() < 1e-12, "mmg total")?;
    ensure(v(ok(cen_total_loss(&vol, &vol, 0.1))?.total).abs() < 1e-12, "cen total")?;

    let xh: Vec<f64> = (0..4 * 16).map(|i| (i % 7) as f64 / 8.0).collect();
    let xt: Vec<f64> = (0..4 * 16).map(|i| (i % 5) as f64 / 8.0).collect();
    let plain: f64 = xh.iter().zip(&xt).map(|(a, b)| (a - b).powi(2)).sum();
    let weighted = v(ok(weighted_image_loss(
        &tensor(xh, &[1, 4, 4, 4]),
        &tensor(xt, &[1, 4, 4, 4]),
        &tensor(vec![1.0; 16], &[1, 4, 4]),
        4.0,
    ))?);
    ensure(weighted == 25.0 * plain, format!("anomaly factor {}", weighted / plain))?;

    let target = tensor(uniform(&mut r, 4 * 64, 0.0, 1.0), &[1, 4, 8, 8]);
    let x0 = uniform(&mut r, 4 * 64, 0.0, 1.0);
    let (g, fd) = gradients(&x0, &[1, 4, 8, 8], 1e-4, |x| weighted_image_loss(x, &target, &s, 4.0).unwrap());
    let e1 = rel_norm(&g, &fd);
    let (g, fd) = gradients(&x0, &[1, 4, 8, 8], 1e-4, |x| ssim_loss(x, &target).unwrap());
    let e2 = rel_norm(&g, &fd);
    let vt = tensor(uniform(&mut r, 512, 0.0, 1.0), &[1, 1, 8, 8, 8]);
    let v0 = uniform(&mut r, 512, 0.0, 1.0);
    let (g, fd) = gradients(&v0, &[1, 1, 8, 8, 8], 1e-4, |x| cen_total_loss(x, &vt, 0.1).unwrap().total);
    let e3 = rel_norm(&g, &fd);
    ensure(e1 < 1e-3 && e2 < 1e-3 && e3 < 1e-3, format!("gradient errors {e1:.1e} {e2:.1e} {e3:.1e}"))?;

    for seed in 0..20 {
        let mut r = rng(100 + seed);
        let (h, w) = (r.random_range(4..20), r.random_range(4..20));
        let a = tensor(uniform(&mut r, h * w, 0.0, 1.0), &[1, h, w]);
        let b = tensor(uniform(&mut r, h * w, 0.0, 1.0), &[1, h, w]);
        let aa = flat(&ok(ssim(&a, &a))?)[0];
        let (ab, ba) = (flat(&ok(ssim(&a, &b))?)[0], flat(&ok(ssim(&b, &a))?)[0]);
        ensure((aa - 1.0).abs() < 1e-12 && (ab - ba).abs() < 1e-12, format!("ssim identity/symmetry at {h}x{w}"))?;
    }
    Ok(format!("gradient rel. errors {e1:.1e}, {e2:.1e}, {e3:.1e}; factor 25 exact"))
}

// ---------------------------------------------------------------- criterion 3

fn windowing_suite() -> Check {
    let p = ok(plan_windows(160, 10))?;
    ensure(
        p.len() == 19 && p.window_depth == 16 && p.stride == 8,
        format!("D=160 s=10: {} windows of {} stride {}", p.len(), p.window_depth, p.stride),
    )?;
    let identity = |sub: ArrayView3<'_, f32>| -> mmsynth::Result<Array3<f32>> { Ok(sub.to_owned()) };
    let mut r = rng(3);
    let mut worst = 0.0f32;
    for d in [125, 160] {
        let grid = Array3::from_shape_fn((6, 5, d), |_| r.random_range(0.0f32..1.0));
        let vol = Volume::new(grid, Modality::T1w);
        for blend in [Blend::Uniform, Blend::Ramp] {
            let base = ok(plan_windows(d, 10))?;
            let plan = ok(plan_windows_with(d, base.window_depth, base.stride, blend))?;
            let out = ok(refine_volume(&vol, &identity, &plan))?;
            let err = out.data.iter().zip(vol.data.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
            worst = worst.max(err);
        }
    }
    ensure(worst <= 1e-6, format!("identity stitching error {worst}"))?;
    let mut tested = 0;
    for d in [16, 17, 32, 40, 64, 99, 125, 160, 155, 240] {
        for s in 1..=12 {
            if d / s == 0 {
                continue;
            }
            let base = ok(plan_windows(d, s))?;
            for blend in [Blend::Uniform, Blend::Ramp] {
                let plan = ok(plan_windows_with(d, base.window_depth, base.stride, blend))?;
                for w in plan.weight_sums() {
                    ensure((w - 1.0).abs() < 1e-12, format!("D={d} s={s} {blend:?}: weight sum {w}"))?;
                }
                tested += 1;
            }
        }
    }
    Ok(format!("19x16/8 plan; stitching error {worst:.1e}; weights sum to 1 on {tested} plans"))
}

// ---------------------------------------------------------------- criterion 4

const OVERFIT_LR: f64 = 5e-4;
const OVERFIT_BATCH: usize = 4;
const OVERFIT_MAX_STEPS: usize = 2000;
const OVERFIT_BUDGET_SECS: f64 = 900.0;

fn overfit() -> Check {
    let case = ok(generate_phantom_case(&PhantomSpec { seed: 3, ..Default::default() }))?;
    let samples: Vec<_> = (0..8)
        .map(|i| slice_at(&case, 4 + 3 * i).map(|s| mask_modality(&s, Modality::ALL[i % 4])))
        .collect::<mmsynth::Result<_>>()
        .map_err(|e| e.to_string())?;
    let arch = MmgArchConfig::reduced(64, 64);
    ensure(arch.base_channels == 16, "reduced arch width")?;
    let cfg = MmgTrainConfig {
        lr: OVERFIT_LR,
        batch_size: OVERFIT_BATCH,
        grad_clip: None,
        ..Default::default()
    };
    let mut trainer = ok(MmgTrainer::new(
        arch,
        ScheduleConfig::default(),
        LossWeights::default(),
        cfg,
        1,
        &Device::Cpu,
    ))?;
    let (x, y, _) = ok(slice_batch(&samples, &Device::Cpu))?;
    // `chain` scores the inference path (corrupt to t=500, full reverse chain);
    // otherwise the clean latent is decoded directly, which is much cheaper.
    let score = |t: &MmgTrainer, chain: bool| -> std::result::Result<f64, String> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = ok(no_grad(|| -> mmsynth::Result<Tensor> {
            let mut z = t.model.encode(&x)?;
            if chain {
                z = refine_latent(&z, &t.model, &t.sched, 500, RefineMode::Chain, &mut rng)?;
            }
            t.model.decode_all(&z)
        }))?;
        let mut total = 0.0;
        for (i, sample) in samples.iter().enumerate() {
            let m = sample.missing.expect("masked").index();
            let a = ok(ok(ok(out.get(i))?.get(m))?.to_dtype(DType::F64))?.unsqueeze(0).map_err(|e| e.to_string())?;
            let b = ok(ok(ok(y.get(i))?.get(m))?.to_dtype(DType::F64))?.unsqueeze(0).map_err(|e| e.to_string())?;
            total += flat(&ok(ssim(&a, &b))?)[0];
        }
        Ok(total / samples.len() as f64)
    };

    let mut windows = Vec::new();
    let mut ssim_chain = None;
    let mut steps = 0;
    let started = Instant::now();
    let mut window_secs = 0.0;
    let mut chain_secs = 60.0;
    let remaining = |reserve: f64| OVERFIT_BUDGET_SECS - started.elapsed().as_secs_f64() - reserve;
    while steps < OVERFIT_MAX_STEPS && remaining(window_secs + chain_secs) > 0.0 {
        let window_started = Instant::now();
        let mut acc = 0.0;
        for _ in 0..100 {
            let off = (steps * OVERFIT_BATCH) % samples.len();
            let batch: Vec<_> = (0..OVERFIT_BATCH).map(|i| samples[(off + i) % samples.len()].clone()).collect();
            acc += ok(trainer.train_step(&batch))?.total;
            steps += 1;
        }
        windows.push(acc / 100.0);
        let decoded = score(&trainer, false)?;
        window_secs = window_started.elapsed().as_secs_f64();
        report(&format!("  overfit step {steps}: window mean loss {:.4e}, decoded ssim {decoded:.4}", acc / 100.0));
        if decoded >= 0.85 {
            let chain_started = Instant::now();
            let s = score(&trainer, true)?;
            chain_secs = chain_started.elapsed().as_secs_f64();
            report(&format!("  overfit step {steps}: masked ssim through the chain {s:.4}"));
            ssim_chain = Some(s);
            if s >= 0.85 {
                break;
            }
        }
    }
    let best = match ssim_chain {
        Some(s) if s >= 0.85 => s,
        _ => score(&trainer, true)?,
    };
    let monotone = windows.windows(2).all(|w| w[1] < w[0]);
    let detail = format!("masked ssim {best:.4} after {steps} steps; {} windows, monotone {monotone}", windows.len());
    ensure(best >= 0.85, detail.clone())?;
    ensure(monotone, format!("{detail}; window means {:?}", windows.iter().map(|w| format!("{w:.3e}")).collect::<Vec<_>>()))?;
    Ok(detail)
}

// ---------------------------------------------------------------- criterion 5

fn jitter(v: &Array3<f32>, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut out = v.clone();
    for mut sl in out.axis_iter_mut(ndarray::Axis(2)) {
        let gain = rng.random_range(0.7f32..1.3);
        let offset = rng.random_range(-0.08f32..0.08);
        sl.mapv_inplace(|x| (x * gain + offset).clamp(0.0, 1.0));
    }
    out
}

fn cen_improvement() -> Check {
    let spec = |seed| PhantomSpec { seed, ..Default::default() };
    let train: Vec<Array3<f32>> = (0..4)
        .map(|i| generate_phantom_case(&spec(50 + i)).map(|c| c.volumes[&Modality::ALL[i as usize % 4]].data.clone()))
        .collect::<mmsynth::Result<_>>()
        .map_err(|e| e.to_string())?;
    let held = ok(generate_phantom_case(&spec(90)))?.volumes[&Modality::Flair].clone();
    let plan = ok(plan_windows(held.depth(), 2))?;
    let arch = CenArchConfig::reduced([plan.window_depth, held.data.dim().0, held.data.dim().1]);
    let cfg = CenTrainConfig {
        lr: 1e-3,
        batch_size: 2,
        ..Default::default()
    };
    let mut trainer = ok(CenTrainer::new(arch, LossWeights::default(), cfg, 5, &Device::Cpu))?;
    let mut r = rng(7);
    let steps = 200;
    for _ in 0..steps {
        let batch: Vec<SubvolumePair> = (0..2)
            .map(|_| {
                let truth = &train[r.random_range(0..train.len())];
                let start = plan.starts[r.random_range(0..plan.len())];
                let input = jitter(truth, &mut r);
                SubvolumePair {
                    input: extract_subvolume(&input, start, plan.window_depth).unwrap().to_owned(),
                    target: extract_subvolume(truth, start, plan.window_depth).unwrap().to_owned(),
                }
            })
            .collect();
        ok(trainer.train_step(&batch))?;
    }
    let corrupted = held.with_data(jitter(&held.data, &mut rng(8)));
    let refined = ok(refine_volume(&corrupted, &trainer.model, &plan))?;
    let (pre, post) = (coherence_metric(&corrupted.data), coherence_metric(&refined.data));
    let (s_in, s_out) = (ok(ssim_3d(&corrupted, &held))?, ok(ssim_3d(&refined, &held))?);
    let detail = format!(
        "coherence {pre:.4} -> {post:.4} (ratio {:.3}, truth {:.4}); ssim {s_in:.4} -> {s_out:.4} after {steps} steps",
        post / pre,
        coherence_metric(&held.data)
    );
    ensure(post <= 0.7 * pre && s_out >= s_in, detail.clone())?;
    Ok(detail)
}

// ------------------------------------------------------------ criteria 6 and 7

struct Pipeline {
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    mmg: PathBuf,
    cen: PathBuf,
    eval: PathBuf,
}

fn mmsynth(root: &Path, args: &[&str]) -> std::result::Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_mmsynth"))
        .args(args)
        .env("SLAMDIMM_RUNS", root)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("mmsynth {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
    }
}

fn pipeline_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.phantom = PhantomSpec {
        depth: 24,
        ..Default::default()
    };
    cfg.preprocess.trim_slices = 4;
    cfg.windows.subvolume_factor = 2;
    cfg.mmg_arch = MmgArchConfig::reduced(64, 64);
    cfg.cen_arch = CenArchConfig::reduced([8, 64, 64]);
    cfg.train.seed = 7;
    cfg.train.mmg = MmgTrainConfig {
        epochs: 6,
        slices_per_epoch: 100,
        batch_size: OVERFIT_BATCH,
        lr: OVERFIT_LR,
        grad_clip: None,
    };
    cfg.train.cen = CenTrainConfig {
        epochs: 3,
        volumes_per_epoch: 20,
        batch_size: 2,
        lr: 1e-3,
        grad_clip: Some(1.0),
    };
    cfg.train.checkpoint_every = 1000;
    cfg
}

fn end_to_end(root: &Path) -> std::result::Result<(Pipeline, String), String> {
    let config = root.join("config.json");
    ok(std::fs::write(&config, ok(serde_json::to_string_pretty(&pipeline_config()))?))?;
    let c = config.to_str().unwrap();
    let runs = root.join("runs");
    let p = |s: &str| runs.join(s);
    mmsynth(&runs, &["--config", c, "--run", "phantom", "phantom", "--cases", "4"])?;
    let raw = p("phantom/data");
    let data = p("prep/data");
    mmsynth(&runs, &["--config", c, "--run", "prep", "preprocess", "--input", raw.to_str().unwrap(), "--out", data.to_str().unwrap()])?;
    mmsynth(&runs, &["--config", c, "--run", "mmg", "train-mmg", "--data", data.to_str().unwrap()])?;
    let mmg = p("mmg/checkpoints/mmg_last.ckpt");
    mmsynth(&runs, &["--config", c, "--run", "cen", "train-cen", "--data", data.to_str().unwrap(), "--mmg", mmg.to_str().unwrap()])?;
    let cen = p("cen/checkpoints/cen_last.ckpt");

    let val = ok(list_cases(&data, Some(Split::Validation)))?;
    let case_dir = val.first().ok_or("no validation case")?.clone();
    let (case, _) = ok(read_case(&case_dir))?;
    let shape = case.shape().ok_or("empty case")?;
    ensure(shape == [64, 64, 16], format!("preprocessed shape {shape:?}"))?;
    let mut lines = Vec::new();
    for m in Modality::ALL {
        let synth_run = format!("synth-{m}");
        mmsynth(&runs, &["--config", c, "--run", &synth_run, "synthesize", "--case", case_dir.to_str().unwrap(), "--mmg", mmg.to_str().unwrap(), "--missing", &m.to_string(), "--debug-dump"])?;
        let synth_path = p(&synth_run).join(format!("{}_{m}_mmg.nii.gz", case.case_id));
        let dumped = ok(read_volume(&p(&synth_run).join("debug").join(format!("{}_input_{m}.nii.gz", case.case_id)), m))?;
        ensure(dumped.data.iter().all(|&v| v == 0.0), format!("{m} not zeroed before inference"))?;
        let refine_run = format!("refine-{m}");
        mmsynth(&runs, &["--config", c, "--run", &refine_run, "refine", "--input", synth_path.to_str().unwrap(), "--cen", cen.to_str().unwrap(), "--modality", &m.to_string()])?;
        let refined_path = p(&refine_run).join(format!("{}_{m}_mmg_cen.nii.gz", case.case_id));
        let truth = ok(case.volume(m))?;
        let zeros = ok(ssim_3d(&truth.with_data(Array3::zeros(truth.data.dim())), truth))?;
        for (label, path) in [("mmg", &synth_path), ("cen", &refined_path)] {
            let v = ok(read_volume(path, m))?;
            ensure(v.shape() == truth.shape(), format!("{m} {label} shape {:?}", v.shape()))?;
            ensure(v.data.iter().all(|x| (0.0..=1.0).contains(x)), format!("{m} {label} outside [0,1]"))?;
            let s = ok(ssim_3d(&v, truth))?;
            ensure(s > zeros, format!("{m} {label}: ssim {s:.4} <= zero baseline {zeros:.4}"))?;
            lines.push(format!("{m}/{label} {s:.3}>{zeros:.3}"));
        }
    }
    mmsynth(&runs, &["--config", c, "--run", "eval", "evaluate", "--data", data.to_str().unwrap(), "--mmg", mmg.to_str().unwrap(), "--cen", cen.to_str().unwrap()])?;
    let eval = p("eval");
    for rel in ["config.json", "version.txt", "seeds.json", "eval_table.csv"] {
        ensure(eval.join(rel).exists(), format!("missing {rel}"))?;
    }
    ensure(p("mmg/train_mmg_log.csv").exists() && p("cen/train_cen_log.csv").exists(), "missing CSV log")?;
    ensure(p("mmg/config.json").exists(), "missing config echo")?;
    let report: EvalReport = ok(read_json(&eval.join("reports").join(format!("{}_t2w.json", case.case_id))))?;
    ensure(report.ssim_cen.is_some(), "report lacks refined score")?;
    let pngs = ok(std::fs::read_dir(eval.join(DIFF_DIR)))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "png"))
        .count();
    ensure(pngs >= 12, format!("{pngs} difference maps"))?;
    Ok((
        Pipeline {
            root: runs,
            config,
            data,
            mmg,
            cen,
            eval,
        },
        format!("ssim vs zero baseline: {}; {pngs} difference maps", lines.join(", ")),
    ))
}

fn determinism(pipe: Option<&Pipeline>) -> Check {
    let case = ok(generate_phantom_case(&PhantomSpec { seed: 4, ..Default::default() }))?;
    let batch: Vec<_> = (0..4)
        .map(|i| slice_at(&case, 6 + 5 * i).map(|s| mask_modality(&s, Modality::ALL[i])))
        .collect::<mmsynth::Result<_>>()
        .map_err(|e| e.to_string())?;
    let make = || {
        MmgTrainer::new(
            MmgArchConfig::reduced(64, 64),
            ScheduleConfig::default(),
            LossWeights::default(),
            MmgTrainConfig::default(),
            21,
            &Device::Cpu,
        )
    };
    let (mut a, mut b) = (ok(make())?, ok(make())?);
    for step in 0..12 {
        let (ra, rb) = (ok(a.train_step(&batch))?, ok(b.train_step(&batch))?);
        ensure(
            ra.total.to_bits() == rb.total.to_bits() && ra.timesteps == rb.timesteps,
            format!("trajectories diverge at step {step}: {} vs {}", ra.total, rb.total),
        )?;
    }
    let dir = ok(tempfile::tempdir())?;
    let path = dir.path().join("a.ckpt");
    ok(a.save(&path))?;
    let (model, _, _) = ok(load_mmg_model(&path, &Device::Cpu))?;
    let (x, _, _) = ok(slice_batch(&batch, &Device::Cpu))?;
    let bits = |t: Tensor| -> Vec<u32> { t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits()).collect() };
    let fwd = |m: &mmsynth::networks::MmgModel| {
        no_grad(|| {
            let z = m.encode(&x).unwrap();
            (bits(m.decode_all(&z).unwrap()), bits(m.denoise_eps(&z, &[3, 300, 900, 1000]).unwrap()))
        })
    };
    ensure(fwd(&model) == fwd(&a.model), "checkpoint forward differs")?;

    let pipe = pipe.ok_or("pipeline artifacts unavailable (criterion 6 did not finish)")?;
    let cfg = ok(RunConfig::load(&pipe.config))?;
    let (model, sched, _) = ok(load_mmg_model(&pipe.mmg, &Device::Cpu))?;
    let (cen, _) = ok(load_cen_model(&pipe.cen, &Device::Cpu))?;
    let synth = MmgSynthesizer {
        model: &model,
        sched: &sched,
        cfg: cfg.inference,
    };
    let mut reports = Vec::new();
    for case in ok(load_cases(&pipe.data, Some(Split::Validation)))? {
        let plan = ok(cfg.windows.plan(case.shape().unwrap()[2]))?;
        for m in Modality::ALL {
            let out = ok(evaluate_case(&case, m, &synth, Some((&cen, &plan)), cfg.train.seed, &cfg.hash()))?;
            let cli: EvalReport = ok(read_json(&pipe.eval.join("reports").join(format!("{}_{m}.json", case.case_id))))?;
            let strip = |r: &EvalReport| EvalReport { runtime_secs: 0.0, ..r.clone() };
            ensure(strip(&cli) == strip(&out.report), format!("{} {m}: CLI {cli:?} vs library {:?}", case.case_id, out.report))?;
            let vol = ok(read_volume(&pipe.eval.join("volumes").join(format!("{}_{m}_mmg.nii.gz", case.case_id)), m))?;
            ensure(vol.data == out.mmg.data, format!("{} {m}: synthesized volume differs", case.case_id))?;
            reports.push(out.report);
        }
    }
    let table = ok(parse_table_csv(&ok(std::fs::read_to_string(pipe.eval.join("eval_table.csv")))?))?;
    ensure(table == aggregate(&reports), "aggregate table differs")?;
    let _ = &pipe.root;
    Ok(format!("12-step trajectories bitwise equal; checkpoint forward bitwise equal; {} CLI reports match", reports.len()))
}

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().unwrap();
    let mut outcomes = vec![
        run(1, "diffusion-math", 60.0, diffusion_math),
        run(2, "loss-suite", 60.0, loss_suite),
        run(3, "windowing-suite", 60.0, windowing_suite),
        run(4, "overfit-learning", OVERFIT_BUDGET_SECS, overfit),
        run(5, "cen-improvement", 600.0, cen_improvement),
    ];
    let mut pipe = None;
    outcomes.push(run(6, "end-to-end-pipeline", 1200.0, || {
        let (p, detail) = end_to_end(tmp.path())?;
        pipe = Some(p);
        Ok(detail)
    }));
    outcomes.push(run(7, "determinism-persistence", 300.0, || determinism(pipe.as_ref())));
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.pass)
        .map(|o| format!("{} {}: {}", o.id, o.name, o.detail))
        .collect();
    report(&format!("acceptance: {}/{} criteria pass", outcomes.len() - failed.len(), outcomes.len()));
    assert!(failed.is_empty(), "failed criteria: {failed:#?}");
}
