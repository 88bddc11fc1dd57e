//! Parameter storage and the small set of layers the models are built from.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Module, Result, Tensor, Var, D};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::im2col::{self, PatchGeometry};
use super::norm;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording off on this thread. Layers then read
/// detached weights, so intermediate buffers are freed as soon as they are
/// consumed instead of being kept alive by the autograd graph.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// A parameter as seen by a forward pass: tracked, or detached under [`no_grad`].
pub fn live(t: &Tensor) -> Tensor {
    if grad_enabled() {
        t.clone()
    } else {
        t.detach()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

struct StoreInner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named trainable tensors. Initialization draws from a seeded generator in
/// construction order, so a fixed seed and architecture give identical weights.
pub struct ParamStore {
    inner: Mutex<StoreInner>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: Device) -> Self {
        Self {
            inner: Mutex::new(StoreInner {
                vars: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
            }),
            dtype,
            device,
        }
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// All parameters sorted by name.
    pub fn vars(&self) -> Vec<(String, Var)> {
        let inner = self.inner.lock().expect("param store poisoned");
        inner.vars.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.lock().expect("param store poisoned").vars.get(name).cloned()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars().iter().map(|(_, v)| v.elem_count()).sum()
    }

    fn create(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.lock().expect("param store poisoned");
        if inner.vars.contains_key(&name) {
            candle_core::bail!("parameter {name} registered twice");
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Normal(s) => (0..n)
                .map(|_| s * inner.rng.sample::<f64, _>(StandardNormal))
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        inner.vars.insert(name, var);
        Ok(handle)
    }
}

/// A prefix into a [`ParamStore`], in the style of a var builder.
#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl AsRef<str>) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamPath {
            store: self.store,
            prefix,
        }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.create(self.pp(name).prefix, shape, init)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamPath, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: p.param("weight", &[out_dim, in_dim], Init::Uniform(bound))?,
            bias: p.param("bias", &[out_dim], Init::Uniform(bound))?,
        })
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let w = live(&self.weight).t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        y.broadcast_add(&live(&self.bias))
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        p: &ParamPath,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let bound = 1.0 / ((c_in * kernel * kernel) as f64).sqrt();
        Self::with_init(p, c_in, c_out, kernel, stride, padding, Init::Uniform(bound))
    }

    pub fn zeroed(p: &ParamPath, c_in: usize, c_out: usize, kernel: usize, padding: usize) -> Result<Self> {
        Self::with_init(p, c_in, c_out, kernel, 1, padding, Init::Zeros)
    }

    fn with_init(
        p: &ParamPath,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let bias_init = match init {
            Init::Zeros => Init::Zeros,
            _ => Init::Uniform(1.0 / ((c_in * kernel * kernel) as f64).sqrt()),
        };
        Ok(Self {
            weight: p.param("weight", &[c_out, c_in, kernel, kernel], init)?,
            bias: p.param("bias", &[c_out], bias_init)?,
            stride,
            padding,
        })
    }
}

impl Module for Conv2d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        im2col::conv2d(x, &live(&self.weight), Some(&live(&self.bias)), self.stride, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    weight: Tensor,
    bias: Tensor,
    geo: PatchGeometry,
}

impl Conv3d {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize, geo: PatchGeometry) -> Result<Self> {
        let fan_in = c_in * geo.kernel.iter().product::<usize>();
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self::with_init(p, c_in, c_out, geo, Init::Uniform(bound), Init::Uniform(bound))
    }

    pub fn zeroed(p: &ParamPath, c_in: usize, c_out: usize, geo: PatchGeometry) -> Result<Self> {
        Self::with_init(p, c_in, c_out, geo, Init::Zeros, Init::Zeros)
    }

    /// Same-padded `k×k×k` convolution with unit stride.
    pub fn same(p: &ParamPath, c_in: usize, c_out: usize, k: usize) -> Result<Self> {
        Self::new(p, c_in, c_out, cube(k, 1, k / 2))
    }

    fn with_init(
        p: &ParamPath,
        c_in: usize,
        c_out: usize,
        geo: PatchGeometry,
        init: Init,
        bias_init: Init,
    ) -> Result<Self> {
        let [kd, kh, kw] = geo.kernel;
        Ok(Self {
            weight: p.param("weight", &[c_out, c_in, kd, kh, kw], init)?,
            bias: p.param("bias", &[c_out], bias_init)?,
            geo,
        })
    }
}

impl Module for Conv3d {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        im2col::conv3d(x, &live(&self.weight), Some(&live(&self.bias)), self.geo)
    }
}

pub fn cube(kernel: usize, stride: usize, padding: usize) -> PatchGeometry {
    PatchGeometry {
        kernel: [kernel; 3],
        stride: [stride; 3],
        padding: [padding; 3],
    }
}

/// Largest group count `<= max_groups` that divides `channels`.
pub fn group_count(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

pub fn group_norm(p: &ParamPath, channels: usize, max_groups: usize) -> Result<GroupNorm> {
    Ok(GroupNorm {
        weight: p.param("weight", &[channels], Init::Ones)?,
        bias: p.param("bias", &[channels], Init::Zeros)?,
        groups: group_count(channels, max_groups),
    })
}

/// Group normalization over `[B, C, ...]` with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
}

impl Module for GroupNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        norm::group_norm(x, &live(&self.weight), &live(&self.bias), self.groups)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(p: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: p.param("weight", &[dim], Init::Ones)?,
            bias: p.param("bias", &[dim], Init::Zeros)?,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + 1e-5)?.sqrt()?)?
            .broadcast_mul(&live(&self.weight))?
            .broadcast_add(&live(&self.bias))
    }
}

/// Sinusoidal embedding of integer timesteps, `[B] -> [B, dim]`.
pub fn timestep_embedding(ts: &[usize], dim: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(10_000f64.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = t as f64 * freq;
            let v = if i < half { arg.cos() } else if i < 2 * half { arg.sin() } else { 0.0 };
            data.push(v);
        }
    }
    Tensor::from_vec(data, (ts.len(), dim), device)?.to_dtype(dtype)
}

/// Nearest-neighbour upsampling of the trailing spatial axes by per-axis
/// integer factors. Built from reshape/broadcast so it is differentiable.
pub fn upsample_nearest(x: &Tensor, factors: &[usize]) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let lead = dims.len() - factors.len();
    let mut expanded = dims[..lead].to_vec();
    let mut target = dims[..lead].to_vec();
    let mut out = dims[..lead].to_vec();
    for (i, &f) in factors.iter().enumerate() {
        let n = dims[lead + i];
        expanded.extend([n, 1]);
        target.extend([n, f]);
        out.push(n * f);
    }
    x.reshape(expanded)?.broadcast_as(target)?.contiguous()?.reshape(out)
}

/// Multi-head self-attention over a token sequence `[B, N, C]`.
#[derive(Debug, Clone)]
pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    pub fn new(p: &ParamPath, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            candle_core::bail!("attention dim {dim} not divisible by {heads} heads");
        }
        Ok(Self {
            qkv: Linear::new(&p.pp("qkv"), dim, 3 * dim)?,
            proj: Linear::new(&p.pp("proj"), dim, dim)?,
            heads,
        })
    }
}

impl Module for SelfAttention {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, n, c) = x.dims3()?;
        let hd = c / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, hd))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (hd as f64).sqrt()))?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, n, c))?;
        self.proj.forward(&out)
    }
}
