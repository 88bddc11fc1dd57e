//! Whole-volume synthesis: per-slice encoding, latent refinement, decoding of
//! the missing channel and depth concatenation.

use candle_core::Tensor;
use ndarray::{s, Array3, Axis};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::{refine_latent, NoiseSchedule, RefineMode};
use crate::error::{Error, Result};
use crate::networks::{no_grad, MmgModel};
use crate::types::{Modality, MultiModalVolume, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub t_test: usize,
    pub mode: RefineMode,
    /// Slices encoded and denoised together.
    pub batch_slices: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            t_test: 500,
            mode: RefineMode::Chain,
            batch_slices: 16,
        }
    }
}

/// Produces the missing modality of a case whose `missing` channel is zeroed.
pub trait Synthesizer {
    fn synthesize(&self, masked: &MultiModalVolume, missing: Modality, seed: u64) -> Result<Volume>;
}

pub struct MmgSynthesizer<'a> {
    pub model: &'a MmgModel,
    pub sched: &'a NoiseSchedule,
    pub cfg: InferenceConfig,
}

/// `[n, 4, H, W]` input for slices `range` of a case, channel `missing` zeroed.
pub fn slice_stack(case: &MultiModalVolume, missing: Modality, range: std::ops::Range<usize>) -> Result<Array3<f32>> {
    let [h, w, d] = case
        .shape()
        .ok_or_else(|| Error::InvalidData(format!("case {} has no volumes", case.case_id)))?;
    if range.end > d {
        return Err(Error::OutOfRange(format!("slices {range:?} of depth {d}")));
    }
    let n = range.len();
    let mut out = Array3::<f32>::zeros((n * Modality::COUNT, h, w));
    for m in Modality::ALL {
        if m == missing {
            continue;
        }
        let v = &case.volume(m)?.data;
        for (i, f) in range.clone().enumerate() {
            out.index_axis_mut(Axis(0), i * Modality::COUNT + m.index())
                .assign(&v.slice(s![.., .., f]));
        }
    }
    Ok(out)
}

impl Synthesizer for MmgSynthesizer<'_> {
    fn synthesize(&self, masked: &MultiModalVolume, missing: Modality, seed: u64) -> Result<Volume> {
        no_grad(|| self.run(masked, missing, seed))
    }
}

impl MmgSynthesizer<'_> {
    fn run(&self, masked: &MultiModalVolume, missing: Modality, seed: u64) -> Result<Volume> {
        let [h, w, d] = masked
            .shape()
            .ok_or_else(|| Error::InvalidData(format!("case {} has no volumes", masked.case_id)))?;
        let [mh, mw] = self.model.config().image_size;
        if (h, w) != (mh, mw) {
            return Err(Error::Shape(format!(
                "case {} slices are {h}x{w}, model expects {mh}x{mw}",
                masked.case_id
            )));
        }
        let device = self.model.params().device();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Array3::<f32>::zeros((h, w, d));
        let step = self.cfg.batch_slices.max(1);
        for start in (0..d).step_by(step) {
            let end = (start + step).min(d);
            let n = end - start;
            let stack = slice_stack(masked, missing, start..end)?;
            let data: Vec<f32> = stack.iter().copied().collect();
            let x = Tensor::from_vec(data, (n, Modality::COUNT, h, w), device)?;
            let z = self.model.encode(&x)?;
            let z_tilde = refine_latent(&z, self.model, self.sched, self.cfg.t_test, self.cfg.mode, &mut rng)?;
            let y = self.model.decode(&z_tilde, missing)?;
            let y = y.flatten_all()?.to_vec1::<f32>()?;
            for i in 0..n {
                let sl = ndarray::ArrayView2::from_shape((h, w), &y[i * h * w..(i + 1) * h * w])
                    .map_err(|e| Error::Shape(e.to_string()))?;
                out.slice_mut(s![.., .., start + i]).assign(&sl);
            }
        }
        let meta = masked.volume(missing).map(|v| v.meta.clone()).unwrap_or_default();
        Ok(Volume {
            data: out,
            modality: missing,
            meta,
        })
    }
}

/// Returns the ground-truth channel; stands in for a perfect model in tests.
pub struct OracleSynthesizer<'a> {
    pub truth: &'a MultiModalVolume,
}

impl Synthesizer for OracleSynthesizer<'_> {
    fn synthesize(&self, _masked: &MultiModalVolume, missing: Modality, _seed: u64) -> Result<Volume> {
        Ok(self.truth.volume(missing)?.clone())
    }
}
