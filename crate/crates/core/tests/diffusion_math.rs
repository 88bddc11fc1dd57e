use candle_core::{DType, Device, Tensor};
use mmsynth::diffusion::{
    forward_sample, forward_step, predict_z0, refine_latent, reverse_step, to_f64_vec, Denoiser, NoiseSchedule,
    RefineMode, ScheduleConfig,
};
use mmsynth::Result;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// ᾱ_1000 of the default schedule, from a 50-digit running product.
const ALPHA_BAR_T: f64 = 4.035_829_765_375_683_3e-5;

fn sched() -> NoiseSchedule {
    ScheduleConfig::default().build().unwrap()
}

fn moments(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// Independent product of `1 - β_t` in log space.
fn alpha_bar_oracle(t: usize) -> f64 {
    (0..t)
        .map(|i| {
            let beta = 1e-4 + i as f64 / 999.0 * (2e-2 - 1e-4);
            (-beta).ln_1p()
        })
        .sum::<f64>()
        .exp()
}

#[test]
fn schedule_matches_oracle() {
    let s = sched();
    assert_eq!(s.beta(1).unwrap(), 1e-4);
    assert_eq!(s.beta(1000).unwrap(), 2e-2);
    assert_eq!(s.alpha(1).unwrap(), 0.9999);
    for t in [1, 10, 500, 1000] {
        let rel = (s.alpha_bar(t).unwrap() - alpha_bar_oracle(t)).abs() / alpha_bar_oracle(t);
        assert!(rel < 1e-12, "t={t} rel={rel}");
    }
    assert!((s.alpha_bar(1000).unwrap() - ALPHA_BAR_T).abs() / ALPHA_BAR_T < 1e-10);
    assert!(s.alpha_bar(1000).unwrap() < 0.05);
    for t in 2..=1000 {
        assert!(s.beta(t).unwrap() > s.beta(t - 1).unwrap());
        assert!(s.alpha_bar(t).unwrap() < s.alpha_bar(t - 1).unwrap());
        let chained = s.alpha_bar(t - 1).unwrap() * s.alpha(t).unwrap();
        assert!((chained - s.alpha_bar(t).unwrap()).abs() <= 1e-15);
    }
}

#[test]
fn invalid_schedules_and_timesteps_rejected() {
    assert!(NoiseSchedule::linear(1, 1e-4, 2e-2).is_err());
    assert!(NoiseSchedule::linear(10, 2e-2, 1e-4).is_err());
    assert!(NoiseSchedule::linear(10, 0.0, 1e-2).is_err());
    assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
    let s = sched();
    let z = Tensor::zeros((1, 4), DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(forward_sample(&z, &[0], &s, &mut rng).is_err());
    assert!(forward_sample(&z, &[1001], &s, &mut rng).is_err());
    assert!(forward_step(&z, 1001, &s, &mut rng).is_err());
}

const N: usize = 100_000;

#[test]
fn closed_form_moments_from_zero() {
    let s = sched();
    let z0 = Tensor::zeros((1, N), DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for t in [1, 10, 500, 1000] {
        let (zt, _) = forward_sample(&z0, &[t], &s, &mut rng).unwrap();
        let (mean, var) = moments(&to_f64_vec(&zt).unwrap());
        let expect = 1.0 - s.alpha_bar(t).unwrap();
        assert!(mean.abs() < 0.02 * expect.sqrt(), "t={t} mean={mean}");
        assert!((var - expect).abs() / expect < 0.02, "t={t} var={var} expect={expect}");
    }
}

#[test]
fn composed_steps_match_closed_form() {
    let s = sched();
    let z0 = Tensor::ones((1, N), DType::F64, &Device::Cpu).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut z = z0.clone();
    let checkpoints = [1, 10, 500, 1000];
    for t in 1..=1000 {
        z = forward_step(&z, t, &s, &mut rng).unwrap();
        if checkpoints.contains(&t) {
            let (m_chain, v_chain) = moments(&to_f64_vec(&z).unwrap());
            let (zt, _) = forward_sample(&z0, &[t], &s, &mut rng).unwrap();
            let (m_closed, v_closed) = moments(&to_f64_vec(&zt).unwrap());
            let scale = m_closed.abs().max(v_closed.sqrt());
            assert!((m_chain - m_closed).abs() / scale < 0.02, "t={t} {m_chain} vs {m_closed}");
            assert!((v_chain - v_closed).abs() / v_closed < 0.02, "t={t} {v_chain} vs {v_closed}");
        }
    }
}

#[test]
fn tiny_beta_step_is_near_identity() {
    let s = NoiseSchedule::linear(2, 1e-12, 2e-12).unwrap();
    let z = Tensor::arange(0f64, 50.0, &Device::Cpu).unwrap().reshape((1, 50)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let out = forward_step(&z, 1, &s, &mut rng).unwrap();
    let diff = (out - &z).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
    assert!(diff < 1e-4, "{diff}");
}

#[test]
fn pure_noise_at_t_max() {
    let s = sched();
    let z0 = Tensor::arange(0f64, N as f64, &Device::Cpu)
        .unwrap()
        .affine(1.0 / N as f64, -0.5)
        .unwrap()
        .reshape((1, N))
        .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (zt, _) = forward_sample(&z0, &[1000], &s, &mut rng).unwrap();
    let a = to_f64_vec(&zt).unwrap();
    let b = to_f64_vec(&z0).unwrap();
    let (ma, va) = moments(&a);
    let (mb, vb) = moments(&b);
    let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / N as f64;
    let corr = cov / (va * vb).sqrt();
    assert!(corr.abs() < 0.05, "{corr}");
}

#[test]
fn predict_z0_inverts_closed_form() {
    let s = sched();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let z0 = Tensor::randn(0f64, 1.0, (2, 3, 4, 4), &Device::Cpu).unwrap();
    let norm = |t: &Tensor| t.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap().sqrt();
    for t in [1, 2, 10, 100, 500, 999, 1000] {
        let (zt, eps) = forward_sample(&z0, &[t], &s, &mut rng).unwrap();
        let back = predict_z0(&zt, &eps, &[t], &s).unwrap();
        let rel = norm(&(back - &z0).unwrap()) / norm(&z0);
        assert!(rel <= 1e-5, "t={t} rel={rel}");
    }
    let zt = Tensor::randn(0f64, 1.0, (1, 8), &Device::Cpu).unwrap();
    let zero = zt.zeros_like().unwrap();
    let direct = predict_z0(&zt, &zero, &[7], &s).unwrap();
    let expect = (&zt / s.alpha_bar(7).unwrap().sqrt()).unwrap();
    assert!(norm(&(direct - expect).unwrap()) < 1e-12);
    // t = 1: ẑ0 = (z - √β₁ ε̂)/√α₁ evaluated directly.
    let eps_hat = Tensor::randn(0f64, 1.0, (1, 8), &Device::Cpu).unwrap();
    let got = to_f64_vec(&predict_z0(&zt, &eps_hat, &[1], &s).unwrap()).unwrap();
    let (zv, ev) = (to_f64_vec(&zt).unwrap(), to_f64_vec(&eps_hat).unwrap());
    for i in 0..8 {
        let oracle = (zv[i] - 1e-4f64.sqrt() * ev[i]) / 0.9999f64.sqrt();
        assert!((got[i] - oracle).abs() < 1e-12);
    }
}

/// Denoiser that knows the clean latent and returns the exact noise that
/// separates it from `z_t`.
struct Oracle<'a> {
    z0: &'a Tensor,
    sched: &'a NoiseSchedule,
}

impl Denoiser for Oracle<'_> {
    fn predict_eps(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor> {
        let ab = self.sched.alpha_bar(ts[0])?;
        Ok(((zt - (self.z0 * ab.sqrt())?)? / (1.0 - ab).sqrt())?)
    }
}

fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let num = (a - b).unwrap().sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    let den = b.sqr().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
    (num / den).sqrt()
}

#[test]
fn oracle_round_trip_from_500() {
    let s = sched();
    let z0 = Tensor::randn(0f64, 1.0, (2, 4, 8, 8), &Device::Cpu).unwrap();
    let oracle = Oracle { z0: &z0, sched: &s };
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = refine_latent(&z0, &oracle, &s, 500, RefineMode::Chain, &mut rng).unwrap();
    let err = rel_err(&z, &z0);
    assert!(err < 0.05, "{err}");
    let single = refine_latent(&z0, &oracle, &s, 500, RefineMode::SingleStep, &mut rng).unwrap();
    assert!(rel_err(&single, &z0) < 1e-6);
}

#[test]
fn refine_identity_at_zero_and_reproducible() {
    let s = sched();
    let z0 = Tensor::randn(0f32, 1.0, (1, 2, 4, 4), &Device::Cpu).unwrap();
    let oracle = |zt: &Tensor, _: &[usize]| -> Result<Tensor> { Ok(zt.zeros_like()?) };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let same = refine_latent(&z0, &oracle, &s, 0, RefineMode::Chain, &mut rng).unwrap();
    assert_eq!(to_f64_vec(&same).unwrap(), to_f64_vec(&z0).unwrap());
    let run = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        to_f64_vec(&refine_latent(&z0, &oracle, &s, 50, RefineMode::Chain, &mut rng).unwrap()).unwrap()
    };
    assert_eq!(run(9), run(9));
    assert_ne!(run(9), run(10));
}

#[test]
fn last_reverse_step_is_deterministic() {
    let s = sched();
    let zt = Tensor::randn(0f64, 1.0, (1, 16), &Device::Cpu).unwrap();
    let den = |zt: &Tensor, _: &[usize]| -> Result<Tensor> { Ok((zt * 0.5)?) };
    let a = reverse_step(&zt, 1, &den, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = reverse_step(&zt, 1, &den, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_eq!(to_f64_vec(&a).unwrap(), to_f64_vec(&b).unwrap());
    let c = reverse_step(&zt, 2, &den, &s, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let d = reverse_step(&zt, 2, &den, &s, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    assert_ne!(to_f64_vec(&c).unwrap(), to_f64_vec(&d).unwrap());
}

#[test]
fn forward_sample_is_seeded() {
    let s = sched();
    let z0 = Tensor::ones((3, 5), DType::F32, &Device::Cpu).unwrap();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (zt, _) = forward_sample(&z0, &[1, 200, 1000], &s, &mut rng).unwrap();
        zt.to_vec2::<f32>().unwrap()
    };
    assert_eq!(draw(1), draw(1));
}
