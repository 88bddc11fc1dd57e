//! Slice-level synthesis network: a shared encoder, a time-conditioned latent
//! denoiser and four modality decoders that see only the latent.

use candle_core::{DType, Device, Module, Result as CResult, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{
    group_norm, timestep_embedding, upsample_nearest, Conv2d, GroupNorm, Linear, ParamPath, ParamStore, SelfAttention,
};
use crate::diffusion::Denoiser;
use crate::error::{Error, Result};
use crate::types::Modality;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmgArchConfig {
    /// Slice height and width the model is built for.
    pub image_size: [usize; 2],
    pub input_channels: usize,
    pub num_blocks: usize,
    pub residual_subblocks: usize,
    pub base_channels: usize,
    /// Latent depth `d`.
    pub latent_channels: usize,
    /// Width of the first level of the latent denoiser.
    pub denoiser_channels: usize,
    pub time_embedding_dim: usize,
    pub attention_heads: usize,
    pub norm_groups: usize,
}

impl Default for MmgArchConfig {
    fn default() -> Self {
        Self {
            image_size: [240, 240],
            input_channels: Modality::COUNT,
            num_blocks: 3,
            residual_subblocks: 5,
            base_channels: 64,
            latent_channels: 256,
            denoiser_channels: 128,
            time_embedding_dim: 256,
            attention_heads: 4,
            norm_groups: 32,
        }
    }
}

impl MmgArchConfig {
    /// Reduced configuration for desk-scale runs on small phantoms.
    pub fn reduced(height: usize, width: usize) -> Self {
        Self {
            image_size: [height, width],
            residual_subblocks: 1,
            base_channels: 16,
            latent_channels: 16,
            denoiser_channels: 32,
            time_embedding_dim: 64,
            attention_heads: 4,
            norm_groups: 8,
            ..Self::default()
        }
    }

    pub fn downsample_factor(&self) -> usize {
        1 << (self.num_blocks - 1)
    }

    /// `(d, h, w)` of the latent.
    pub fn latent_shape(&self) -> [usize; 3] {
        let f = self.downsample_factor();
        [self.latent_channels, self.image_size[0] / f, self.image_size[1] / f]
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0 || self.residual_subblocks == 0 {
            return Err(Error::Config("num_blocks and residual_subblocks must be >= 1".into()));
        }
        if self.input_channels != Modality::COUNT {
            return Err(Error::Config(format!("input_channels must be {}", Modality::COUNT)));
        }
        if [self.base_channels, self.latent_channels, self.denoiser_channels, self.time_embedding_dim]
            .contains(&0)
        {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.time_embedding_dim % 2 != 0 {
            return Err(Error::Config("time_embedding_dim must be even".into()));
        }
        let f = self.downsample_factor();
        for &n in &self.image_size {
            if n == 0 || n % f != 0 {
                return Err(Error::Config(format!(
                    "image size {:?} must be divisible by {f} for {} blocks",
                    self.image_size, self.num_blocks
                )));
            }
        }
        let lowest = self.denoiser_channels << (self.num_blocks - 1);
        if lowest % self.attention_heads != 0 {
            return Err(Error::Config(format!(
                "attention width {lowest} not divisible by {} heads",
                self.attention_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(p: &ParamPath, c_in: usize, c_out: usize, temb_dim: Option<usize>, groups: usize) -> CResult<Self> {
        Ok(Self {
            norm1: group_norm(&p.pp("norm1"), c_in, groups)?,
            conv1: Conv2d::new(&p.pp("conv1"), c_in, c_out, 3, 1, 1)?,
            temb: temb_dim.map(|d| Linear::new(&p.pp("temb"), d, c_out)).transpose()?,
            norm2: group_norm(&p.pp("norm2"), c_out, groups)?,
            conv2: Conv2d::new(&p.pp("conv2"), c_out, c_out, 3, 1, 1)?,
            skip: (c_in != c_out)
                .then(|| Conv2d::new(&p.pp("skip"), c_in, c_out, 1, 1, 0))
                .transpose()?,
        })
    }

    fn forward(&self, x: &Tensor, temb: Option<&Tensor>) -> CResult<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(temb)) = (&self.temb, temb) {
            let t = proj.forward(&temb.silu()?)?;
            h = h.broadcast_add(&t.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        h + skip
    }
}

fn blocks(
    p: &ParamPath,
    n: usize,
    c_in: usize,
    c_out: usize,
    temb: Option<usize>,
    groups: usize,
) -> CResult<Vec<ResBlock>> {
    (0..n)
        .map(|i| ResBlock::new(&p.pp(i.to_string()), if i == 0 { c_in } else { c_out }, c_out, temb, groups))
        .collect()
}

fn run(blocks: &[ResBlock], x: Tensor, temb: Option<&Tensor>) -> CResult<Tensor> {
    blocks.iter().try_fold(x, |h, b| b.forward(&h, temb))
}

/// Downsampling path: `[B, 4, H, W] -> [B, d, h, w]`.
#[derive(Debug, Clone)]
pub struct Encoder {
    conv_in: Conv2d,
    levels: Vec<Vec<ResBlock>>,
    downs: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    fn new(p: &ParamPath, cfg: &MmgArchConfig) -> CResult<Self> {
        let g = cfg.norm_groups;
        let c0 = cfg.base_channels;
        let conv_in = Conv2d::new(&p.pp("conv_in"), cfg.input_channels, c0, 3, 1, 1)?;
        let mut levels = Vec::new();
        let mut downs = Vec::new();
        let mut c = c0;
        for b in 0..cfg.num_blocks {
            let c_out = c0 << b;
            levels.push(blocks(&p.pp(format!("level{b}")), cfg.residual_subblocks, c, c_out, None, g)?);
            c = c_out;
            if b + 1 < cfg.num_blocks {
                downs.push(Conv2d::new(&p.pp(format!("down{b}")), c, c, 3, 2, 1)?);
            }
        }
        Ok(Self {
            conv_in,
            levels,
            downs,
            norm_out: group_norm(&p.pp("norm_out"), c, g)?,
            conv_out: Conv2d::new(&p.pp("conv_out"), c, cfg.latent_channels, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let mut h = self.conv_in.forward(x)?;
        for (i, level) in self.levels.iter().enumerate() {
            h = run(level, h, None)?;
            if let Some(down) = self.downs.get(i) {
                h = down.forward(&h)?;
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)
    }
}

/// Upsampling path without skips: `[B, d, h, w] -> [B, 1, H, W]` in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Decoder {
    conv_in: Conv2d,
    levels: Vec<Vec<ResBlock>>,
    ups: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    fn new(p: &ParamPath, cfg: &MmgArchConfig) -> CResult<Self> {
        let g = cfg.norm_groups;
        let c0 = cfg.base_channels;
        let top = c0 << (cfg.num_blocks - 1);
        let conv_in = Conv2d::new(&p.pp("conv_in"), cfg.latent_channels, top, 3, 1, 1)?;
        let mut levels = Vec::new();
        let mut ups = Vec::new();
        for b in (0..cfg.num_blocks).rev() {
            let c = c0 << b;
            levels.push(blocks(&p.pp(format!("level{b}")), cfg.residual_subblocks, c, c, None, g)?);
            if b > 0 {
                ups.push(Conv2d::new(&p.pp(format!("up{b}")), c, c0 << (b - 1), 3, 1, 1)?);
            }
        }
        Ok(Self {
            conv_in,
            levels,
            ups,
            norm_out: group_norm(&p.pp("norm_out"), c0, g)?,
            conv_out: Conv2d::new(&p.pp("conv_out"), c0, 1, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, z: &Tensor) -> CResult<Tensor> {
        let mut h = self.conv_in.forward(z)?;
        for (i, level) in self.levels.iter().enumerate() {
            h = run(level, h, None)?;
            if let Some(up) = self.ups.get(i) {
                h = up.forward(&upsample_nearest(&h, &[2, 2])?)?;
            }
        }
        let logits = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        candle_nn::ops::sigmoid(&logits)
    }
}

#[derive(Debug, Clone)]
struct AttentionBlock {
    norm: GroupNorm,
    attn: SelfAttention,
}

impl AttentionBlock {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = self.norm.forward(x)?.flatten_from(2)?.transpose(1, 2)?.contiguous()?;
        let out = self.attn.forward(&tokens)?.transpose(1, 2)?.reshape((b, c, h, w))?;
        x + out
    }
}

/// Time-conditioned ε-predictor on the latent grid. Self-attention sits only
/// at the lowest resolution.
#[derive(Debug, Clone)]
pub struct LatentDenoiser {
    time_dim: usize,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Vec<ResBlock>>,
    downsample: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: AttentionBlock,
    mid2: ResBlock,
    up: Vec<Vec<ResBlock>>,
    upsample: Vec<Conv2d>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl LatentDenoiser {
    fn new(p: &ParamPath, cfg: &MmgArchConfig) -> CResult<Self> {
        let g = cfg.norm_groups;
        let u = cfg.denoiser_channels;
        let td = cfg.time_embedding_dim;
        let temb = Some(td);
        let conv_in = Conv2d::new(&p.pp("conv_in"), cfg.latent_channels, u, 3, 1, 1)?;
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut c = u;
        for b in 0..cfg.num_blocks {
            let c_out = u << b;
            down.push(blocks(&p.pp(format!("down{b}")), cfg.residual_subblocks, c, c_out, temb, g)?);
            c = c_out;
            if b + 1 < cfg.num_blocks {
                downsample.push(Conv2d::new(&p.pp(format!("downsample{b}")), c, c, 3, 2, 1)?);
            }
        }
        let mid1 = ResBlock::new(&p.pp("mid1"), c, c, temb, g)?;
        let mid_attn = AttentionBlock {
            norm: group_norm(&p.pp("mid_attn.norm"), c, g)?,
            attn: SelfAttention::new(&p.pp("mid_attn"), c, cfg.attention_heads)?,
        };
        let mid2 = ResBlock::new(&p.pp("mid2"), c, c, temb, g)?;
        let mut up = Vec::new();
        let mut upsample = Vec::new();
        for b in (0..cfg.num_blocks).rev() {
            let c_out = u << b;
            up.push(blocks(&p.pp(format!("up{b}")), cfg.residual_subblocks, c + c_out, c_out, temb, g)?);
            c = c_out;
            if b > 0 {
                upsample.push(Conv2d::new(&p.pp(format!("upsample{b}")), c, u << (b - 1), 3, 1, 1)?);
                c = u << (b - 1);
            }
        }
        Ok(Self {
            time_dim: td,
            time_in: Linear::new(&p.pp("time_in"), td, td)?,
            time_out: Linear::new(&p.pp("time_out"), td, td)?,
            conv_in,
            down,
            downsample,
            mid1,
            mid_attn,
            mid2,
            up,
            upsample,
            norm_out: group_norm(&p.pp("norm_out"), c, g)?,
            conv_out: Conv2d::new(&p.pp("conv_out"), c, cfg.latent_channels, 3, 1, 1)?,
        })
    }

    pub fn forward(&self, zt: &Tensor, ts: &[usize]) -> CResult<Tensor> {
        let b = zt.dim(0)?;
        let ts: Vec<usize> = if ts.len() == 1 { vec![ts[0]; b] } else { ts.to_vec() };
        let emb = timestep_embedding(&ts, self.time_dim, zt.dtype(), zt.device())?;
        let temb = self.time_out.forward(&self.time_in.forward(&emb)?.silu()?)?;
        let temb = Some(&temb);

        // The latent is zero-padded up to a multiple of the UNet's own factor
        // and cropped back at the end.
        let (_, _, lh, lw) = zt.dims4()?;
        let f = 1 << self.down.len().saturating_sub(1);
        let padded = zt
            .pad_with_zeros(2, 0, lh.next_multiple_of(f) - lh)?
            .pad_with_zeros(3, 0, lw.next_multiple_of(f) - lw)?;
        let mut h = self.conv_in.forward(&padded)?;
        let mut skips = Vec::with_capacity(self.down.len());
        for (i, level) in self.down.iter().enumerate() {
            h = run(level, h, temb)?;
            skips.push(h.clone());
            if let Some(ds) = self.downsample.get(i) {
                h = ds.forward(&h)?;
            }
        }
        h = self.mid1.forward(&h, temb)?;
        h = self.mid_attn.forward(&h)?;
        h = self.mid2.forward(&h, temb)?;
        for (i, level) in self.up.iter().enumerate() {
            let skip = skips.pop().expect("one skip per level");
            h = run(level, Tensor::cat(&[&h, &skip], 1)?, temb)?;
            if let Some(us) = self.upsample.get(i) {
                h = us.forward(&upsample_nearest(&h, &[2, 2])?)?;
            }
        }
        self.conv_out
            .forward(&self.norm_out.forward(&h)?.silu()?)?
            .narrow(2, 0, lh)?
            .narrow(3, 0, lw)
    }
}

/// The full slice model with its parameters.
pub struct MmgModel {
    cfg: MmgArchConfig,
    store: ParamStore,
    pub encoder: Encoder,
    pub denoiser: LatentDenoiser,
    decoders: Vec<Decoder>,
}

impl MmgModel {
    pub fn new(cfg: MmgArchConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, DType::F32, device.clone());
        let (encoder, denoiser, decoders) = {
            let root = store.root();
            let encoder = Encoder::new(&root.pp("encoder"), &cfg)?;
            let denoiser = LatentDenoiser::new(&root.pp("denoiser"), &cfg)?;
            let decoders = Modality::ALL
                .iter()
                .map(|m| Decoder::new(&root.pp(format!("decoder.{m}")), &cfg))
                .collect::<CResult<Vec<_>>>()?;
            (encoder, denoiser, decoders)
        };
        Ok(Self {
            cfg,
            store,
            encoder,
            denoiser,
            decoders,
        })
    }

    pub fn config(&self) -> &MmgArchConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let dims = x.dims();
        let [h, w] = self.cfg.image_size;
        if dims.len() != 4 || dims[1] != self.cfg.input_channels || dims[2] != h || dims[3] != w {
            return Err(Error::Shape(format!(
                "model expects [B, {}, {h}, {w}] slices, got {dims:?}",
                self.cfg.input_channels
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        Ok(self.encoder.forward(x)?)
    }

    pub fn denoise_eps(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor> {
        Ok(self.denoiser.forward(zt, ts)?)
    }

    pub fn decode(&self, z_tilde: &Tensor, m: Modality) -> Result<Tensor> {
        let dec = self
            .decoders
            .get(m.index())
            .ok_or_else(|| Error::Config(format!("no decoder for {m}")))?;
        Ok(dec.forward(z_tilde)?)
    }

    /// All four modalities in canonical channel order, `[B, 4, H, W]`.
    pub fn decode_all(&self, z_tilde: &Tensor) -> Result<Tensor> {
        let outs = self
            .decoders
            .iter()
            .map(|d| d.forward(z_tilde))
            .collect::<CResult<Vec<_>>>()?;
        Ok(Tensor::cat(&outs, 1)?)
    }
}

impl Denoiser for MmgModel {
    fn predict_eps(&self, zt: &Tensor, ts: &[usize]) -> Result<Tensor> {
        self.denoise_eps(zt, ts)
    }
}
