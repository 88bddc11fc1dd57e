#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(data: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn taps(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window / 2) as f64;
    let raw: Vec<f64> = (0..window).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Direct windowed SSIM by nested loops over every window position of an
/// n-dimensional grid. Axes shorter than 11 use one uniform window.
pub fn ssim_oracle(a: &[f64], b: &[f64], shape: &[usize]) -> f64 {
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let g = taps(11, 1.5);
    let axes: Vec<(usize, Vec<f64>)> = shape
        .iter()
        .map(|&n| if n < 11 { (1, vec![1.0 / n as f64; n]) } else { (n - 10, g.clone()) })
        .collect();
    let strides: Vec<usize> = (0..shape.len()).map(|i| shape[i + 1..].iter().product()).collect();
    let positions: usize = axes.iter().map(|(p, _)| p).product();
    let mut total = 0.0;
    for pos in 0..positions {
        let mut origin = vec![0; shape.len()];
        let mut r = pos;
        for i in (0..shape.len()).rev() {
            origin[i] = r % axes[i].0;
            r /= axes[i].0;
        }
        let win: usize = axes.iter().map(|(_, w)| w.len()).product();
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for k in 0..win {
            let mut rem = k;
            let mut idx = 0;
            let mut w = 1.0;
            for i in (0..shape.len()).rev() {
                let len = axes[i].1.len();
                let o = rem % len;
                rem /= len;
                w *= axes[i].1[o];
                idx += (origin[i] + o) * strides[i];
            }
            ma += w * a[idx];
            mb += w * b[idx];
            saa += w * a[idx] * a[idx];
            sbb += w * b[idx] * b[idx];
            sab += w * a[idx] * b[idx];
        }
        let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    total / positions as f64
}

/// Analytic gradient of `f` at `x` and its central-difference estimate.
pub fn gradients(x: &[f64], shape: &[usize], h: f64, f: impl Fn(&Tensor) -> Tensor) -> (Vec<f64>, Vec<f64>) {
    let var = Var::from_tensor(&tensor(x.to_vec(), shape)).unwrap();
    let loss = f(var.as_tensor());
    let grads = loss.backward().unwrap();
    let analytic = flat(grads.get(var.as_tensor()).unwrap());
    let eval = |v: Vec<f64>| flat(&f(&tensor(v, shape)))[0];
    let numeric = (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            let mut m = x.to_vec();
            p[i] += h;
            m[i] -= h;
            (eval(p) - eval(m)) / (2.0 * h)
        })
        .collect();
    (analytic, numeric)
}

/// `‖a − b‖ / ‖b‖`.
pub fn rel_norm(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}
