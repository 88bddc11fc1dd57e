//! Fused group normalization with an analytic backward pass.

use candle_core::{CpuStorage, CustomOp3, Layout, Result, Shape, Tensor};
use num_traits::Float;

const EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    groups: usize,
    /// Elements per channel.
    spatial: usize,
}

impl Geometry {
    fn of(shape: &Shape, groups: usize) -> Result<Self> {
        let dims = shape.dims();
        if dims.len() < 2 || dims[1] % groups != 0 {
            candle_core::bail!("group norm: {groups} groups do not divide shape {dims:?}");
        }
        Ok(Self {
            channels: dims[1],
            groups,
            spatial: dims[2..].iter().product(),
        })
    }

    fn group_len(&self) -> usize {
        self.channels / self.groups * self.spatial
    }
}

/// Mean and reciprocal standard deviation of one group, in f64.
fn stats<T: Float>(x: &[T]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().map(|v| v.to_f64().unwrap_or(0.0)).sum::<f64>() / n;
    let var = x
        .iter()
        .map(|v| {
            let d = v.to_f64().unwrap_or(0.0) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + EPS).sqrt())
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).unwrap_or_else(T::nan)
}

fn forward<T: Float>(x: &[T], gamma: &[T], beta: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let per_group = g.channels / g.groups;
    for (gi, (src, dst)) in x.chunks(g.group_len()).zip(out.chunks_mut(g.group_len())).enumerate() {
        let (mean, rstd) = stats(src);
        let c0 = (gi % g.groups) * per_group;
        for (k, (s, d)) in src.chunks(g.spatial).zip(dst.chunks_mut(g.spatial)).enumerate() {
            let scale = gamma[c0 + k].to_f64().unwrap_or(0.0) * rstd;
            let shift = beta[c0 + k].to_f64().unwrap_or(0.0) - mean * scale;
            let (scale, shift) = (cast::<T>(scale), cast::<T>(shift));
            for (a, b) in s.iter().zip(d.iter_mut()) {
                *b = *a * scale + shift;
            }
        }
    }
    out
}

/// Returns `dx` followed by `dγ` and `dβ` in one buffer.
fn backward<T: Float>(x: &[T], gamma: &[T], dy: &[T], g: &Geometry) -> Vec<T> {
    let mut out = vec![T::zero(); x.len() + 2 * g.channels];
    let (dx, rest) = out.split_at_mut(x.len());
    let mut dgamma = vec![0.0f64; g.channels];
    let mut dbeta = vec![0.0f64; g.channels];
    let per_group = g.channels / g.groups;
    let n = g.group_len() as f64;
    for (gi, ((src, gy), gx)) in x
        .chunks(g.group_len())
        .zip(dy.chunks(g.group_len()))
        .zip(dx.chunks_mut(g.group_len()))
        .enumerate()
    {
        let (mean, rstd) = stats(src);
        let c0 = (gi % g.groups) * per_group;
        let (mut sum_dxhat, mut sum_dxhat_xhat) = (0.0f64, 0.0f64);
        for k in 0..per_group {
            let gam = gamma[c0 + k].to_f64().unwrap_or(0.0);
            let (mut sg, mut sgx) = (0.0f64, 0.0f64);
            for (a, d) in src[k * g.spatial..(k + 1) * g.spatial]
                .iter()
                .zip(&gy[k * g.spatial..(k + 1) * g.spatial])
            {
                let xhat = (a.to_f64().unwrap_or(0.0) - mean) * rstd;
                let d = d.to_f64().unwrap_or(0.0);
                sg += d;
                sgx += d * xhat;
            }
            dbeta[c0 + k] += sg;
            dgamma[c0 + k] += sgx;
            sum_dxhat += gam * sg;
            sum_dxhat_xhat += gam * sgx;
        }
        let (m1, m2) = (sum_dxhat / n, sum_dxhat_xhat / n);
        for k in 0..per_group {
            let gam = gamma[c0 + k].to_f64().unwrap_or(0.0);
            for ((a, d), o) in src[k * g.spatial..(k + 1) * g.spatial]
                .iter()
                .zip(&gy[k * g.spatial..(k + 1) * g.spatial])
                .zip(&mut gx[k * g.spatial..(k + 1) * g.spatial])
            {
                let xhat = (a.to_f64().unwrap_or(0.0) - mean) * rstd;
                *o = cast(rstd * (gam * d.to_f64().unwrap_or(0.0) - m1 - xhat * m2));
            }
        }
    }
    for (o, v) in rest.iter_mut().zip(dgamma.iter().chain(&dbeta)) {
        *o = cast(*v);
    }
    out
}

fn slice<'a, T>(data: &'a [T], layout: &Layout) -> Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("group norm expects contiguous operands"),
    }
}

macro_rules! float_dispatch {
    ($name:expr, ($($s:ident, $l:ident),+), |$($v:ident),+| $body:expr) => {
        match ($($s,)+) {
            ($(CpuStorage::F32($v),)+) => {
                $(let $v = slice($v, $l)?;)+
                CpuStorage::F32($body)
            }
            ($(CpuStorage::F64($v),)+) => {
                $(let $v = slice($v, $l)?;)+
                CpuStorage::F64($body)
            }
            _ => candle_core::bail!("{}: expected matching f32 or f64 operands", $name),
        }
    };
}

/// `(x [B,C,...], γ [C], β [C]) -> y`
struct GroupNormOp {
    groups: usize,
}

/// `(x, γ, dy) -> [dx | dγ | dβ]`
struct GroupNormGrad {
    groups: usize,
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::of(l1.shape(), self.groups)?;
        let out = float_dispatch!("group-norm", (s1, l1, s2, l2, s3, l3), |x, gamma, beta| forward(
            x, gamma, beta, &g
        ));
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let packed = x.apply_op3_no_bwd(gamma, &grad.contiguous()?, &GroupNormGrad { groups: self.groups })?;
        let (n, c) = (x.elem_count(), gamma.elem_count());
        let dx = packed.narrow(0, 0, n)?.reshape(x.shape())?;
        let dgamma = packed.narrow(0, n, c)?;
        let dbeta = packed.narrow(0, n + c, c)?;
        Ok((Some(dx), Some(dgamma), Some(dbeta)))
    }
}

impl CustomOp3 for GroupNormGrad {
    fn name(&self) -> &'static str {
        "group-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> Result<(CpuStorage, Shape)> {
        let g = Geometry::of(l1.shape(), self.groups)?;
        let out = float_dispatch!("group-norm-grad", (s1, l1, s2, l2, s3, l3), |x, gamma, dy| backward(
            x, gamma, dy, &g
        ));
        Ok((out, Shape::from(l1.shape().elem_count() + 2 * g.channels)))
    }
}

/// Group normalization of `[B, C, ...]` with per-channel scale and shift.
pub fn group_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, groups: usize) -> Result<Tensor> {
    x.contiguous()?
        .apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups })
}
