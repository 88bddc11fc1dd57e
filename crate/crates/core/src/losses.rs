//! Training objectives and the windowed SSIM they share with evaluation.
//!
//! Reductions are sums over pixels and modalities for each sample, averaged
//! over the batch.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Extra weight inside the anomaly mask.
    pub lambda1: f64,
    /// Latent consistency weight.
    pub lambda2: f64,
    /// SSIM weight in the slice objective.
    pub gamma1: f64,
    /// SSIM weight in the volumetric refiner objective.
    pub gamma2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 4.0,
            lambda2: 2.0,
            gamma1: 0.5,
            gamma2: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda1, self.lambda2, self.gamma1, self.gamma2];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if self.gamma2 > 1.0 {
            return Err(Error::Config(format!("gamma2 must lie in [0,1], got {}", self.gamma2)));
        }
        Ok(())
    }
}

/// Gaussian-window SSIM parameters. Inputs are assumed to span `data_range`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.data_range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.data_range).powi(2)
    }

    /// Normalized 1D Gaussian taps.
    pub fn taps(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let raw: Vec<f64> = (0..self.window)
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let sum: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / sum).collect()
    }

    /// Valid-mode filtering matrix `[n_out, n]` for an axis of length `n`.
    /// An axis shorter than the window collapses to one uniform window.
    fn axis_matrix(&self, n: usize) -> (Vec<f64>, usize) {
        if n < self.window {
            return (vec![1.0 / n as f64; n], 1);
        }
        let taps = self.taps();
        let n_out = n - self.window + 1;
        let mut m = vec![0.0; n_out * n];
        for r in 0..n_out {
            m[r * n + r..r * n + r + self.window].copy_from_slice(&taps);
        }
        (m, n_out)
    }
}

/// Applies the separable window along every axis after the first.
fn window_filter(x: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    let rank = x.rank();
    let mut out = x.clone();
    for axis in 1..rank {
        let n = out.dim(axis)?;
        let (m, n_out) = cfg.axis_matrix(n);
        let mt = Tensor::from_vec(m, (n_out, n), x.device())?.to_dtype(x.dtype())?.t()?;
        let moved = out.transpose(axis, rank - 1)?.contiguous()?;
        let mut dims = moved.dims().to_vec();
        let rows = moved.elem_count() / n;
        let filtered = moved.reshape((rows, n))?.matmul(&mt)?;
        dims[rank - 1] = n_out;
        out = filtered.reshape(dims)?.transpose(axis, rank - 1)?;
    }
    Ok(out.contiguous()?)
}

/// SSIM per leading element: `a`, `b` are `[N, ...spatial]`, result is `[N]`.
/// Works for 2D slices and 3D volumes alike; differentiable.
pub fn ssim_with(a: &Tensor, b: &Tensor, cfg: &SsimConfig) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("ssim inputs {:?} vs {:?}", a.dims(), b.dims())));
    }
    if a.rank() < 2 {
        return Err(Error::Shape("ssim needs a leading batch axis".into()));
    }
    let n = a.dim(0)?;
    let stacked = Tensor::cat(&[a, b, &a.sqr()?, &b.sqr()?, &(a * b)?], 0)?;
    let f = window_filter(&stacked, cfg)?;
    let mu_a = f.narrow(0, 0, n)?;
    let mu_b = f.narrow(0, n, n)?;
    let e_aa = f.narrow(0, 2 * n, n)?;
    let e_bb = f.narrow(0, 3 * n, n)?;
    let e_ab = f.narrow(0, 4 * n, n)?;
    let mu_aa = mu_a.sqr()?;
    let mu_bb = mu_b.sqr()?;
    let mu_ab = (&mu_a * &mu_b)?;
    let var_a = (e_aa - &mu_aa)?;
    let var_b = (e_bb - &mu_bb)?;
    let cov = (e_ab - &mu_ab)?;
    let num = (((mu_ab * 2.0)? + cfg.c1())? * ((cov * 2.0)? + cfg.c2())?)?;
    let den = (((mu_aa + mu_bb)? + cfg.c1())? * ((var_a + var_b)? + cfg.c2())?)?;
    let map = (num / den)?;
    Ok(map.flatten_from(1)?.mean(1)?)
}

pub fn ssim(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    ssim_with(a, b, &SsimConfig::default())
}

fn batch_of(x: &Tensor) -> Result<f64> {
    Ok(x.dim(0)? as f64)
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `Σ_m ‖(x̂_m − x_m)·(1 + λ₁ S)‖²` for `x̂`, `x` of shape `[B, 4, H, W]` and
/// `S` of shape `[B, H, W]`.
pub fn weighted_image_loss(x_hat: &Tensor, x: &Tensor, s: &Tensor, lambda1: f64) -> Result<Tensor> {
    same_shape(x_hat, x, "weighted_image_loss")?;
    let (b, _, h, w) = x.dims4()?;
    if s.elem_count() != b * h * w {
        return Err(Error::Shape(format!("mask {:?} for images {:?}", s.dims(), x.dims())));
    }
    let weight = ((s.reshape((b, 1, h, w))? * lambda1)? + 1.0)?;
    let residual = (x_hat - x)?.broadcast_mul(&weight)?;
    Ok((residual.sqr()?.sum_all()? / batch_of(x)?)?)
}

/// `λ₂ ‖z̃ − z‖²`; the target `z` is detached.
pub fn latent_consistency_loss(z_tilde: &Tensor, z: &Tensor, lambda2: f64) -> Result<Tensor> {
    same_shape(z_tilde, z, "latent_consistency_loss")?;
    let diff = (z_tilde - z.detach())?;
    Ok(((diff.sqr()?.sum_all()? * lambda2)? / batch_of(z)?)?)
}

/// `Σ_m (1 − SSIM(x̂_m, x_m))` over the channels of `[B, C, H, W]` images.
pub fn ssim_loss(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    same_shape(x_hat, x, "ssim_loss")?;
    let (b, c, h, w) = x.dims4()?;
    let s = ssim(&x_hat.reshape((b * c, h, w))?, &x.reshape((b * c, h, w))?)?;
    Ok(((s.affine(-1.0, 1.0)?).sum_all()? / b as f64)?)
}

#[derive(Debug, Clone)]
pub struct MmgLoss {
    pub image: Tensor,
    pub latent: Tensor,
    pub ssim: Tensor,
    pub total: Tensor,
}

/// `L_rec (image + latent terms) + γ₁ · L_SSIM`.
pub fn mmg_total_loss(
    x_hat: &Tensor,
    x: &Tensor,
    s: &Tensor,
    z_tilde: &Tensor,
    z: &Tensor,
    weights: &LossWeights,
) -> Result<MmgLoss> {
    let image = weighted_image_loss(x_hat, x, s, weights.lambda1)?;
    let latent = latent_consistency_loss(z_tilde, z, weights.lambda2)?;
    let ssim = ssim_loss(x_hat, x)?;
    let total = ((&image + &latent)? + (&ssim * weights.gamma1)?)?;
    Ok(MmgLoss {
        image,
        latent,
        ssim,
        total,
    })
}

#[derive(Debug, Clone)]
pub struct CenLoss {
    pub rec: Tensor,
    pub ssim: Tensor,
    pub total: Tensor,
}

/// Unweighted squared error plus `γ₂ (1 − SSIM₃D)` on `[B, 1, D, H, W]` or
/// `[B, D, H, W]` subvolumes.
pub fn cen_total_loss(v_hat: &Tensor, v: &Tensor, gamma2: f64) -> Result<CenLoss> {
    same_shape(v_hat, v, "cen_total_loss")?;
    let b = v.dim(0)?;
    let rec = ((v_hat - v)?.sqr()?.sum_all()? / b as f64)?;
    let flat_a = v_hat.flatten_from(1)?;
    let spatial: Vec<usize> = v.dims()[1..].iter().copied().filter(|&d| d != 1).collect();
    let mut dims = vec![b];
    dims.extend(spatial);
    let s = ssim(&flat_a.reshape(dims.clone())?, &v.reshape(dims)?)?;
    let ssim = (s.affine(-1.0, 1.0)?.sum_all()? / b as f64)?;
    let total = (&rec + (&ssim * gamma2)?)?;
    Ok(CenLoss { rec, ssim, total })
}

/// Reads a scalar loss tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn default_weights() {
        let w = LossWeights::default();
        assert_eq!((w.lambda1, w.lambda2, w.gamma1, w.gamma2), (4.0, 2.0, 0.5, 0.1));
        assert!(w.validate().is_ok());
        assert!(LossWeights { gamma2: 1.5, ..w }.validate().is_err());
        assert!(LossWeights { lambda1: -1.0, ..w }.validate().is_err());
    }

    #[test]
    fn taps_sum_to_one_and_are_symmetric() {
        let t = SsimConfig::default().taps();
        assert_eq!(t.len(), 11);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..11 {
            assert!((t[i] - t[10 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn ssim_constant_images_from_formula() -> Result<()> {
        let dev = Device::Cpu;
        let a = Tensor::zeros((1, 16, 16), DType::F64, &dev)?;
        let b = Tensor::ones((1, 16, 16), DType::F64, &dev)?;
        let cfg = SsimConfig::default();
        let (c1, c2) = (cfg.c1(), cfg.c2());
        let expected = (c1 * c2) / ((1.0 + c1) * c2);
        let got = scalar(&ssim(&a, &b)?.squeeze(0)?)?;
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!((expected - 1e-4).abs() < 1e-6);
        Ok(())
    }

    #[test]
    fn shape_errors() -> Result<()> {
        let dev = Device::Cpu;
        let a = Tensor::zeros((1, 4, 8, 8), DType::F32, &dev)?;
        let b = Tensor::zeros((1, 4, 8, 4), DType::F32, &dev)?;
        let s = Tensor::zeros((1, 8, 8), DType::F32, &dev)?;
        assert!(weighted_image_loss(&a, &b, &s, 4.0).is_err());
        assert!(cen_total_loss(&a, &b, 0.1).is_err());
        assert!(latent_consistency_loss(&a, &b, 2.0).is_err());
        Ok(())
    }
}
