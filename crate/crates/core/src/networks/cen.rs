//! Volumetric refiner: a transformer encoder over 3D patches with a
//! convolutional decoder. The output convolution starts at zero, so a fresh
//! model returns its input unchanged.

use candle_core::{DType, Device, Module, Result as CResult, Tensor};
use serde::{Deserialize, Serialize};

use super::im2col::PatchGeometry;
use super::layers::{
    group_norm, live, upsample_nearest, Conv3d, GroupNorm, Init, LayerNorm, Linear, ParamPath, ParamStore, SelfAttention,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CenArchConfig {
    /// Sub-volume shape `[depth, height, width]`.
    pub volume_shape: [usize; 3],
    /// Patch size `[depth, height, width]`; each entry must be a power of two.
    pub patch: [usize; 3],
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Decoder width at full resolution; doubles per coarser stage.
    pub feature_channels: usize,
    pub norm_groups: usize,
}

impl Default for CenArchConfig {
    fn default() -> Self {
        Self {
            volume_shape: [16, 240, 240],
            patch: [16, 16, 16],
            embed_dim: 256,
            depth: 8,
            heads: 8,
            mlp_ratio: 4,
            feature_channels: 16,
            norm_groups: 8,
        }
    }
}

impl CenArchConfig {
    /// Small refiner for phantom-scale sub-volumes.
    pub fn reduced(volume_shape: [usize; 3]) -> Self {
        let patch = volume_shape.map(|n| largest_pow2_divisor(n).min(8));
        Self {
            volume_shape,
            patch,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 2,
            feature_channels: 8,
            norm_groups: 4,
        }
    }

    pub fn grid(&self) -> [usize; 3] {
        [0, 1, 2].map(|a| self.volume_shape[a] / self.patch[a])
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Number of ×2 upsampling stages from the token grid to full resolution.
    pub fn stages(&self) -> usize {
        self.patch.iter().map(|p| p.trailing_zeros() as usize).max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            let (n, p) = (self.volume_shape[a], self.patch[a]);
            if p == 0 || !p.is_power_of_two() {
                return Err(Error::Config(format!("patch {:?} must be powers of two", self.patch)));
            }
            if n == 0 || n % p != 0 {
                return Err(Error::Config(format!(
                    "volume shape {:?} not divisible by patch {:?}",
                    self.volume_shape, self.patch
                )));
            }
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.depth == 0 || self.mlp_ratio == 0 || self.feature_channels == 0 {
            return Err(Error::Config("depth, mlp_ratio and feature_channels must be >= 1".into()));
        }
        Ok(())
    }
}

fn largest_pow2_divisor(n: usize) -> usize {
    if n == 0 {
        1
    } else {
        1 << n.trailing_zeros()
    }
}

#[derive(Debug, Clone)]
struct TransformerLayer {
    ln1: LayerNorm,
    attn: SelfAttention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerLayer {
    fn new(p: &ParamPath, dim: usize, heads: usize, mlp_ratio: usize) -> CResult<Self> {
        Ok(Self {
            ln1: LayerNorm::new(&p.pp("ln1"), dim)?,
            attn: SelfAttention::new(&p.pp("attn"), dim, heads)?,
            ln2: LayerNorm::new(&p.pp("ln2"), dim)?,
            fc1: Linear::new(&p.pp("fc1"), dim, dim * mlp_ratio)?,
            fc2: Linear::new(&p.pp("fc2"), dim * mlp_ratio, dim)?,
        })
    }

    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let x = (x + self.attn.forward(&self.ln1.forward(x)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&x)?)?.gelu()?)?;
        x + h
    }
}

#[derive(Debug, Clone)]
struct ConvUnit {
    conv: Conv3d,
    norm: GroupNorm,
}

impl ConvUnit {
    fn new(p: &ParamPath, c_in: usize, c_out: usize, groups: usize) -> CResult<Self> {
        Ok(Self {
            conv: Conv3d::same(&p.pp("conv"), c_in, c_out, 3)?,
            norm: group_norm(&p.pp("norm"), c_out, groups)?,
        })
    }

    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        self.norm.forward(&self.conv.forward(x)?)?.silu()
    }
}

#[derive(Debug, Clone)]
struct UpStage {
    factors: [usize; 3],
    unit: ConvUnit,
}

pub struct CenModel {
    cfg: CenArchConfig,
    store: ParamStore,
    patch_embed: Conv3d,
    pos: Tensor,
    layers: Vec<TransformerLayer>,
    ln_out: LayerNorm,
    bottleneck: ConvUnit,
    mid_skip: ConvUnit,
    ups: Vec<UpStage>,
    input_skip: Vec<ConvUnit>,
    fuse: ConvUnit,
    conv_out: Conv3d,
}

impl CenModel {
    pub fn new(cfg: CenArchConfig, seed: u64, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(seed, DType::F32, device.clone());
        let parts = {
            let p = store.root();
            let e = cfg.embed_dim;
            let g = cfg.norm_groups;
            let fc = cfg.feature_channels;
            let stages = cfg.stages();
            let patch_embed = Conv3d::new(
                &p.pp("patch_embed"),
                1,
                e,
                PatchGeometry {
                    kernel: cfg.patch,
                    stride: cfg.patch,
                    padding: [0; 3],
                },
            )?;
            let pos = p.param("pos_embed", &[1, cfg.tokens(), e], Init::Normal(0.02))?;
            let layers = (0..cfg.depth)
                .map(|i| TransformerLayer::new(&p.pp(format!("layer{i}")), e, cfg.heads, cfg.mlp_ratio))
                .collect::<CResult<Vec<_>>>()?;
            let ln_out = LayerNorm::new(&p.pp("ln_out"), e)?;
            let top = fc << stages;
            let bottleneck = ConvUnit::new(&p.pp("bottleneck"), e, top, g)?;
            let mid_skip = ConvUnit::new(&p.pp("mid_skip"), e, top, g)?;
            let mut remaining = cfg.patch;
            let mut ups = Vec::with_capacity(stages);
            for s in 0..stages {
                let factors = remaining.map(|r| if r > 1 { 2 } else { 1 });
                remaining = [0, 1, 2].map(|a| remaining[a] / factors[a]);
                let c_in = fc << (stages - s);
                ups.push(UpStage {
                    factors,
                    unit: ConvUnit::new(&p.pp(format!("up{s}")), c_in, c_in / 2, g)?,
                });
            }
            let input_skip = vec![
                ConvUnit::new(&p.pp("input_skip0"), 1, fc, g)?,
                ConvUnit::new(&p.pp("input_skip1"), fc, fc, g)?,
            ];
            let fuse = ConvUnit::new(&p.pp("fuse"), 2 * fc, fc, g)?;
            let conv_out = Conv3d::zeroed(&p.pp("conv_out"), fc, 1, super::layers::cube(3, 1, 1))?;
            (patch_embed, pos, layers, ln_out, bottleneck, mid_skip, ups, input_skip, fuse, conv_out)
        };
        let (patch_embed, pos, layers, ln_out, bottleneck, mid_skip, ups, input_skip, fuse, conv_out) = parts;
        Ok(Self {
            cfg,
            store,
            patch_embed,
            pos,
            layers,
            ln_out,
            bottleneck,
            mid_skip,
            ups,
            input_skip,
            fuse,
            conv_out,
        })
    }

    pub fn config(&self) -> &CenArchConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `[B, 1, D, H, W] -> [B, 1, D, H, W]`, clamped to `[0, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims();
        let [d, h, w] = self.cfg.volume_shape;
        if dims.len() != 5 || dims[1] != 1 || dims[2..] != [d, h, w] {
            return Err(Error::Shape(format!("refiner expects [B, 1, {d}, {h}, {w}], got {dims:?}")));
        }
        Ok(self.forward_inner(x)?)
    }

    fn forward_inner(&self, x: &Tensor) -> CResult<Tensor> {
        let b = x.dim(0)?;
        let [gd, gh, gw] = self.cfg.grid();
        let e = self.cfg.embed_dim;
        let tokens = self.patch_embed.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let mut t = tokens.broadcast_add(&live(&self.pos))?;
        let mid = self.layers.len() / 2;
        let mut mid_state = None;
        for (i, layer) in self.layers.iter().enumerate() {
            t = layer.forward(&t)?;
            if i + 1 == mid.max(1) {
                mid_state = Some(t.clone());
            }
        }
        let to_grid = |t: &Tensor| -> CResult<Tensor> { t.transpose(1, 2)?.contiguous()?.reshape((b, e, gd, gh, gw)) };
        let last = to_grid(&self.ln_out.forward(&t)?)?;
        let mid_state = to_grid(&mid_state.unwrap_or(t))?;
        let mut y = (self.bottleneck.forward(&last)? + self.mid_skip.forward(&mid_state)?)?;
        for stage in &self.ups {
            y = stage.unit.forward(&upsample_nearest(&y, &stage.factors)?)?;
        }
        let skip = self.input_skip.iter().try_fold(x.clone(), |h, u| u.forward(&h))?;
        let fused = self.fuse.forward(&Tensor::cat(&[&y, &skip], 1)?)?;
        let correction = self.conv_out.forward(&fused)?;
        (x + correction)?.clamp(0f32, 1f32)
    }
}
