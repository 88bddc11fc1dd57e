//! Training loops for the slice model and the volumetric refiner, the Adam
//! optimizer they share, loss logging and checkpoint round trips.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};
use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{
    load_checkpoint, param_tensors, restore_params, save_checkpoint, AdamParams, Checkpoint, CheckpointHeader,
    ModelKind, RngState,
};
use crate::diffusion::{forward_sample_with, gaussian_like, predict_z0, sample_timesteps, NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::losses::{cen_total_loss, mmg_total_loss, scalar, CenLoss, LossWeights, MmgLoss};
use crate::networks::layers::ParamStore;
use crate::networks::{CenArchConfig, CenModel, MmgArchConfig, MmgModel};
use crate::preprocessing::{draw_missing, mask_modality, slice_at};
use crate::types::{MultiModalVolume, SliceSample, Volume};
use crate::volumetric::{extract_subvolume, WindowPlan};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmgTrainConfig {
    pub epochs: usize,
    pub slices_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for MmgTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1600,
            slices_per_epoch: 500,
            batch_size: 4,
            lr: 1e-4,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CenTrainConfig {
    pub epochs: usize,
    pub volumes_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub grad_clip: Option<f64>,
}

impl Default for CenTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            volumes_per_epoch: 100,
            batch_size: 2,
            lr: 1e-4,
            grad_clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mmg: MmgTrainConfig,
    pub cen: CenTrainConfig,
    pub seed: u64,
    /// Epochs between checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mmg: MmgTrainConfig::default(),
            cen: CenTrainConfig::default(),
            seed: 0,
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("mmg.epochs", self.mmg.epochs),
            ("mmg.slices_per_epoch", self.mmg.slices_per_epoch),
            ("mmg.batch_size", self.mmg.batch_size),
            ("cen.epochs", self.cen.epochs),
            ("cen.volumes_per_epoch", self.cen.volumes_per_epoch),
            ("cen.batch_size", self.cen.batch_size),
            ("checkpoint_every", self.checkpoint_every),
        ];
        for (name, n) in counts {
            if n == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for lr in [self.mmg.lr, self.cen.lr] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

/// Independent child seed for a named purpose.
pub fn derive_seed(root: u64, label: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(root.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

/// Adam with bias correction and optional global-norm gradient clipping.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    slots: Vec<Slot>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: AdamConfig) -> Result<Self> {
        let slots = store
            .vars()
            .into_iter()
            .map(|(name, var)| {
                let m = var.zeros_like()?;
                let v = var.zeros_like()?;
                Ok(Slot { name, var, m, v })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, step: 0, slots })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update and returns the pre-clipping gradient norm.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, clip: Option<f64>) -> Result<f64> {
        let mut sq = 0.0;
        for slot in &self.slots {
            if let Some(g) = grads.get(slot.var.as_tensor()) {
                sq += scalar(&g.sqr()?.sum_all()?)?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm is {norm}")));
        }
        let scale = match clip {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { (g * scale)? } else { g.clone() };
            slot.m = ((&slot.m * beta1)? + (&g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(norm)
    }

    pub fn params(&self) -> AdamParams {
        AdamParams {
            lr: self.cfg.lr,
            beta1: self.cfg.beta1,
            beta2: self.cfg.beta2,
            eps: self.cfg.eps,
            step: self.step,
        }
    }

    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.slots.len());
        for s in &self.slots {
            out.push((format!("adam_m/{}", s.name), s.m.clone()));
            out.push((format!("adam_v/{}", s.name), s.v.clone()));
        }
        out
    }

    pub fn restore(&mut self, params: &AdamParams, ckpt: &Checkpoint) -> Result<()> {
        self.cfg = AdamConfig {
            lr: params.lr,
            beta1: params.beta1,
            beta2: params.beta2,
            eps: params.eps,
        };
        self.step = params.step;
        for s in &mut self.slots {
            for (prefix, dst) in [("adam_m", &mut s.m), ("adam_v", &mut s.v)] {
                let key = format!("{prefix}/{}", s.name);
                let t = ckpt
                    .tensors
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if t.dims() != s.var.dims() {
                    return Err(Error::Checkpoint(format!("tensor {key} has shape {:?}", t.dims())));
                }
                *dst = t.to_dtype(s.var.dtype())?;
            }
        }
        Ok(())
    }
}

/// Appends loss rows to a CSV file, writing the header on creation.
pub struct LossLog {
    file: fs::File,
}

pub const MMG_LOG_HEADER: &str = "step,L_rec_img,L_latent,L_SSIM,total";
pub const CEN_LOG_HEADER: &str = "step,L_rec_3d,L_SSIM,total";

impl LossLog {
    pub fn create(path: &Path, header: &str) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let exists = path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if !exists {
            writeln!(file, "{header}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    pub fn row(&mut self, values: &[String]) -> Result<()> {
        writeln!(self.file, "{}", values.join(","))
            .map_err(|e| Error::io(std::path::PathBuf::from("<loss log>"), e))
    }
}

fn stack(arrays: Vec<Vec<f32>>, shape: &[usize], device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = arrays.into_iter().flatten().collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// `(x, target, S)` tensors for a batch of slices: `[B,4,H,W]`, `[B,4,H,W]`, `[B,H,W]`.
pub fn slice_batch(batch: &[SliceSample], device: &Device) -> Result<(Tensor, Tensor, Tensor)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidData("empty batch".into()))?;
    let (c, h, w) = first.x.dim();
    for s in batch {
        if s.x.dim() != (c, h, w) || s.target.dim() != (c, h, w) || s.mask.dim() != (h, w) {
            return Err(Error::Shape("slices in a batch must share one shape".into()));
        }
    }
    let b = batch.len();
    let flat = |a: &Array3<f32>| a.as_standard_layout().iter().copied().collect::<Vec<f32>>();
    let x = stack(batch.iter().map(|s| flat(&s.x)).collect(), &[b, c, h, w], device)?;
    let y = stack(batch.iter().map(|s| flat(&s.target)).collect(), &[b, c, h, w], device)?;
    let m = stack(
        batch.iter().map(|s| s.mask.iter().copied().collect()).collect(),
        &[b, h, w],
        device,
    )?;
    Ok((x, y, m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmgStepRecord {
    pub step: u64,
    pub timesteps: Vec<usize>,
    pub image: f64,
    pub latent: f64,
    pub ssim: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl MmgStepRecord {
    pub fn csv(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            format!("{:e}", self.image),
            format!("{:e}", self.latent),
            format!("{:e}", self.ssim),
            format!("{:e}", self.total),
        ]
    }
}

/// Owns the slice model, its optimizer and the training generator.
/// Stratum offset for training step `step`: a golden-ratio sequence from a
/// seeded start. Each offset is uniform on [0,1) over the seed, and any run of
/// consecutive steps covers [0,1) nearly evenly.
pub fn timestep_offset(seed: u64, step: u64) -> f64 {
    let start: f64 = ChaCha8Rng::seed_from_u64(derive_seed(seed, "mmg-timesteps")).random();
    let golden = (5f64.sqrt() - 1.0) / 2.0;
    (start + step as f64 * golden).fract()
}

pub struct MmgTrainer {
    pub model: MmgModel,
    pub sched: NoiseSchedule,
    pub weights: LossWeights,
    pub cfg: MmgTrainConfig,
    pub epoch: usize,
    pub step: u64,
    seed: u64,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl MmgTrainer {
    pub fn new(
        arch: MmgArchConfig,
        schedule: ScheduleConfig,
        weights: LossWeights,
        cfg: MmgTrainConfig,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        weights.validate()?;
        let model = MmgModel::new(arch, derive_seed(seed, "mmg-init"), device)?;
        let opt = Adam::new(
            model.params(),
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        )?;
        Ok(Self {
            model,
            sched: schedule.build()?,
            weights,
            cfg,
            epoch: 0,
            step: 0,
            seed,
            opt,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "mmg-train")),
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Loss for a batch with given timesteps and corruption noise.
    ///
    /// The denoiser sees the corrupted latent as a constant. Its latent loss
    /// trains only the denoiser; decoders and encoder learn through the image
    /// terms, where the refined latent passes the encoder gradient unchanged.
    pub fn losses(&self, x: &Tensor, target: &Tensor, mask: &Tensor, ts: &[usize], eps: &Tensor) -> Result<MmgLoss> {
        let z = self.model.encode(x)?;
        let zt = forward_sample_with(&z, eps, ts, &self.sched)?;
        let eps_hat = self.model.denoise_eps(&zt.detach(), ts)?;
        let z_tilde = predict_z0(&zt, &eps_hat, ts, &self.sched)?;
        let z_lat = predict_z0(&zt.detach(), &eps_hat, ts, &self.sched)?;
        let x_hat = self.model.decode_all(&z_tilde)?;
        mmg_total_loss(&x_hat, target, mask, &z_lat, &z, &self.weights)
    }

    pub fn train_step(&mut self, batch: &[SliceSample]) -> Result<MmgStepRecord> {
        let device = self.model.params().device().clone();
        let (x, target, mask) = slice_batch(batch, &device)?;
        let offset = timestep_offset(self.seed, self.step);
        let ts = sample_timesteps(batch.len(), &self.sched, offset, &mut self.rng);
        let z_shape = {
            let [d, h, w] = self.model.config().latent_shape();
            (batch.len(), d, h, w)
        };
        let eps = gaussian_like(&Tensor::zeros(z_shape, x.dtype(), &device)?, &mut self.rng)?;
        let loss = self.losses(&x, &target, &mask, &ts, &eps)?;
        let rec = MmgStepRecord {
            step: self.step + 1,
            timesteps: ts.clone(),
            image: scalar(&loss.image)?,
            latent: scalar(&loss.latent)?,
            ssim: scalar(&loss.ssim)?,
            total: scalar(&loss.total)?,
            grad_norm: 0.0,
        };
        if !rec.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "slice model step {}: t={:?} image={} latent={} ssim={} total={}",
                rec.step, ts, rec.image, rec.latent, rec.ssim, rec.total
            )));
        }
        let grads = loss.total.backward()?;
        let grad_norm = self.opt.step(&grads, self.cfg.grad_clip)?;
        self.step += 1;
        Ok(MmgStepRecord { grad_norm, ..rec })
    }

    /// Draws `slices_per_epoch` (case, slice) pairs uniformly with replacement
    /// over every slice in `pool`, each with a uniformly drawn masked channel.
    pub fn sample_epoch(&mut self, pool: &[MultiModalVolume]) -> Result<Vec<SliceSample>> {
        let depths: Vec<usize> = pool.iter().map(|c| c.shape().map(|s| s[2]).unwrap_or(0)).collect();
        let total: usize = depths.iter().sum();
        if total == 0 {
            return Err(Error::InvalidData("training pool holds no slices".into()));
        }
        (0..self.cfg.slices_per_epoch)
            .map(|_| {
                let mut k = self.rng.random_range(0..total);
                let mut case = 0;
                while k >= depths[case] {
                    k -= depths[case];
                    case += 1;
                }
                let sample = slice_at(&pool[case], k)?;
                Ok(mask_modality(&sample, draw_missing(&mut self.rng)))
            })
            .collect()
    }

    /// One epoch over freshly sampled slices; returns the per-step records.
    pub fn train_epoch(&mut self, pool: &[MultiModalVolume], log: Option<&mut LossLog>) -> Result<Vec<MmgStepRecord>> {
        let samples = self.sample_epoch(pool)?;
        let mut records = Vec::new();
        let mut log = log;
        for batch in samples.chunks(self.cfg.batch_size) {
            let rec = self.train_step(batch)?;
            if let Some(l) = log.as_deref_mut() {
                l.row(&rec.csv())?;
            }
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(ModelKind::Mmg, self.weights, self.seed);
        h.mmg_arch = Some(self.model.config().clone());
        h.schedule = Some(self.sched.config());
        h.epoch = self.epoch;
        h.step = self.step;
        h.rng = Some(RngState::capture(&self.rng));
        h.optimizer = Some(self.opt.params());
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = param_tensors(self.model.params());
        tensors.extend(self.opt.state_tensors());
        save_checkpoint(path, &self.header(), &tensors)
    }

    /// Resumes training state exactly as saved.
    pub fn load(path: &Path, cfg: MmgTrainConfig, device: &Device) -> Result<Self> {
        let ckpt = load_checkpoint(path, device)?;
        let h = &ckpt.header;
        if h.kind != ModelKind::Mmg {
            return Err(Error::Checkpoint(format!("{} is not a slice-model checkpoint", path.display())));
        }
        let arch = h
            .mmg_arch
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing mmg_arch".into()))?;
        let schedule = h.schedule.unwrap_or_default();
        let mut t = Self::new(arch, schedule, h.loss_weights, cfg, h.seed, device)?;
        restore_params(t.model.params(), &ckpt.tensors)?;
        if let Some(p) = &h.optimizer {
            t.opt.restore(p, &ckpt)?;
        }
        if let Some(r) = &h.rng {
            t.rng = r.restore()?;
        }
        t.epoch = h.epoch;
        t.step = h.step;
        Ok(t)
    }
}

/// Inference-only load of a slice model and its schedule.
pub fn load_mmg_model(path: &Path, device: &Device) -> Result<(MmgModel, NoiseSchedule, CheckpointHeader)> {
    let ckpt = load_checkpoint(path, device)?;
    let h = ckpt.header.clone();
    if h.kind != ModelKind::Mmg {
        return Err(Error::Checkpoint(format!("{} is not a slice-model checkpoint", path.display())));
    }
    let arch = h
        .mmg_arch
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing mmg_arch".into()))?;
    let model = MmgModel::new(arch, 0, device)?;
    restore_params(model.params(), &ckpt.tensors)?;
    let sched = h.schedule.unwrap_or_default().build()?;
    Ok((model, sched, h))
}

pub fn load_cen_model(path: &Path, device: &Device) -> Result<(CenModel, CheckpointHeader)> {
    let ckpt = load_checkpoint(path, device)?;
    let h = ckpt.header.clone();
    if h.kind != ModelKind::Cen {
        return Err(Error::Checkpoint(format!("{} is not a refiner checkpoint", path.display())));
    }
    let arch = h
        .cen_arch
        .clone()
        .ok_or_else(|| Error::Checkpoint("missing cen_arch".into()))?;
    let model = CenModel::new(arch, 0, device)?;
    restore_params(model.params(), &ckpt.tensors)?;
    Ok((model, h))
}

/// Paired `(H, W, w_d)` sub-volumes: refiner input and ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct SubvolumePair {
    pub input: Array3<f32>,
    pub target: Array3<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenStepRecord {
    pub step: u64,
    pub rec: f64,
    pub ssim: f64,
    pub total: f64,
    pub grad_norm: f64,
}

impl CenStepRecord {
    pub fn csv(&self) -> Vec<String> {
        vec![
            self.step.to_string(),
            format!("{:e}", self.rec),
            format!("{:e}", self.ssim),
            format!("{:e}", self.total),
        ]
    }
}

/// `[B, 1, D, H, W]` from `(H, W, D)` grids.
pub fn subvolume_batch(grids: &[&Array3<f32>], device: &Device) -> Result<Tensor> {
    let (h, w, d) = grids
        .first()
        .map(|g| g.dim())
        .ok_or_else(|| Error::InvalidData("empty batch".into()))?;
    let mut data = Vec::with_capacity(grids.len() * h * w * d);
    for g in grids {
        if g.dim() != (h, w, d) {
            return Err(Error::Shape("sub-volumes in a batch must share one shape".into()));
        }
        data.extend(g.view().permuted_axes([2, 0, 1]).iter().copied());
    }
    Ok(Tensor::from_vec(data, (grids.len(), 1, d, h, w), device)?)
}

pub struct CenTrainer {
    pub model: CenModel,
    pub weights: LossWeights,
    pub cfg: CenTrainConfig,
    pub epoch: usize,
    pub step: u64,
    seed: u64,
    opt: Adam,
    rng: ChaCha8Rng,
}

impl CenTrainer {
    pub fn new(arch: CenArchConfig, weights: LossWeights, cfg: CenTrainConfig, seed: u64, device: &Device) -> Result<Self> {
        weights.validate()?;
        let model = CenModel::new(arch, derive_seed(seed, "cen-init"), device)?;
        let opt = Adam::new(
            model.params(),
            AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            },
        )?;
        Ok(Self {
            model,
            weights,
            cfg,
            epoch: 0,
            step: 0,
            seed,
            opt,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, "cen-train")),
        })
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn losses(&self, batch: &[SubvolumePair]) -> Result<CenLoss> {
        let device = self.model.params().device();
        let inputs: Vec<&Array3<f32>> = batch.iter().map(|p| &p.input).collect();
        let targets: Vec<&Array3<f32>> = batch.iter().map(|p| &p.target).collect();
        let x = subvolume_batch(&inputs, device)?;
        let y = subvolume_batch(&targets, device)?;
        let refined = self.model.forward(&x)?;
        cen_total_loss(&refined, &y, self.weights.gamma2)
    }

    pub fn train_step(&mut self, batch: &[SubvolumePair]) -> Result<CenStepRecord> {
        let loss = self.losses(batch)?;
        let rec = CenStepRecord {
            step: self.step + 1,
            rec: scalar(&loss.rec)?,
            ssim: scalar(&loss.ssim)?,
            total: scalar(&loss.total)?,
            grad_norm: 0.0,
        };
        if !rec.total.is_finite() {
            return Err(Error::NonFinite(format!(
                "refiner step {}: rec={} ssim={} total={}",
                rec.step, rec.rec, rec.ssim, rec.total
            )));
        }
        let grads = loss.total.backward()?;
        let grad_norm = self.opt.step(&grads, self.cfg.grad_clip)?;
        self.step += 1;
        Ok(CenStepRecord { grad_norm, ..rec })
    }

    /// Draws `volumes_per_epoch` volume pairs with replacement and one
    /// planned window from each.
    pub fn sample_epoch(&mut self, pool: &[(Volume, Volume)], plan: &WindowPlan) -> Result<Vec<SubvolumePair>> {
        if pool.is_empty() {
            return Err(Error::InvalidData("refiner pool is empty".into()));
        }
        (0..self.cfg.volumes_per_epoch)
            .map(|_| {
                let (input, target) = &pool[self.rng.random_range(0..pool.len())];
                let start = plan.starts[self.rng.random_range(0..plan.len())];
                Ok(SubvolumePair {
                    input: extract_subvolume(&input.data, start, plan.window_depth)?.to_owned(),
                    target: extract_subvolume(&target.data, start, plan.window_depth)?.to_owned(),
                })
            })
            .collect()
    }

    pub fn train_epoch(
        &mut self,
        pool: &[(Volume, Volume)],
        plan: &WindowPlan,
        log: Option<&mut LossLog>,
    ) -> Result<Vec<CenStepRecord>> {
        let pairs = self.sample_epoch(pool, plan)?;
        let mut log = log;
        let mut records = Vec::new();
        for batch in pairs.chunks(self.cfg.batch_size) {
            let rec = self.train_step(batch)?;
            if let Some(l) = log.as_deref_mut() {
                l.row(&rec.csv())?;
            }
            records.push(rec);
        }
        self.epoch += 1;
        Ok(records)
    }

    pub fn header(&self) -> CheckpointHeader {
        let mut h = CheckpointHeader::new(ModelKind::Cen, self.weights, self.seed);
        h.cen_arch = Some(self.model.config().clone());
        h.epoch = self.epoch;
        h.step = self.step;
        h.rng = Some(RngState::capture(&self.rng));
        h.optimizer = Some(self.opt.params());
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = param_tensors(self.model.params());
        tensors.extend(self.opt.state_tensors());
        save_checkpoint(path, &self.header(), &tensors)
    }

    pub fn load(path: &Path, cfg: CenTrainConfig, device: &Device) -> Result<Self> {
        let ckpt = load_checkpoint(path, device)?;
        let h = &ckpt.header;
        if h.kind != ModelKind::Cen {
            return Err(Error::Checkpoint(format!("{} is not a refiner checkpoint", path.display())));
        }
        let arch = h
            .cen_arch
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing cen_arch".into()))?;
        let mut t = Self::new(arch, h.loss_weights, cfg, h.seed, device)?;
        restore_params(t.model.params(), &ckpt.tensors)?;
        if let Some(p) = &h.optimizer {
            t.opt.restore(p, &ckpt)?;
        }
        if let Some(r) = &h.rng {
            t.rng = r.restore()?;
        }
        t.epoch = h.epoch;
        t.step = h.step;
        Ok(t)
    }
}
