//! Intensity and slice preprocessing: percentile clipping, axial trimming,
//! min-max normalization, slice extraction and missing-modality simulation.
//!
//! The pipeline order is clip → trim → normalize → slice. Clipping and
//! normalization are computed per volume.

use ndarray::{s, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Modality, MultiModalVolume, SliceSample, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizeRange {
    /// Affine map onto `[0, 1]`.
    UnitInterval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub clip_low_pct: f64,
    pub clip_high_pct: f64,
    /// Axial slices dropped from each end of the volume.
    pub trim_slices: usize,
    pub normalize_to: NormalizeRange,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_low_pct: 0.5,
            clip_high_pct: 99.5,
            trim_slices: 15,
            normalize_to: NormalizeRange::UnitInterval,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.clip_low_pct
            && self.clip_low_pct < self.clip_high_pct
            && self.clip_high_pct <= 100.0;
        if !ok {
            return Err(Error::Config(format!(
                "clip percentiles must satisfy 0 <= low < high <= 100, got {} and {}",
                self.clip_low_pct, self.clip_high_pct
            )));
        }
        Ok(())
    }
}

/// Percentile of already-sorted data, interpolating linearly between order
/// statistics (rank `p/100 * (n-1)`).
pub fn percentile_sorted<T: Copy + Into<f64>>(sorted: &[T], pct: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty data");
    let rank = (pct / 100.0).clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    let (a, b): (f64, f64) = (sorted[lo].into(), sorted[hi].into());
    a + (b - a) * frac
}

/// Lower and upper clipping bounds of a volume.
pub fn clip_bounds(v: &Volume, cfg: &PreprocessConfig) -> (f32, f32) {
    let mut values: Vec<f32> = v.data.iter().copied().collect();
    values.sort_unstable_by(f32::total_cmp);
    (
        percentile_sorted(&values, cfg.clip_low_pct) as f32,
        percentile_sorted(&values, cfg.clip_high_pct) as f32,
    )
}

pub fn percentile_clip(v: &Volume, cfg: &PreprocessConfig) -> Volume {
    let (lo, hi) = clip_bounds(v, cfg);
    if lo == hi {
        return v.clone();
    }
    clip_to(v, lo, hi)
}

/// Clamps every voxel to `[lo, hi]`.
pub fn clip_to(v: &Volume, lo: f32, hi: f32) -> Volume {
    v.with_data(v.data.mapv(|x| x.clamp(lo, hi)))
}

/// Keeps axial slices `[n, D-n)` of every modality and of the mask.
pub fn trim_axial_slices(case: &MultiModalVolume, n: usize) -> Result<MultiModalVolume> {
    let depth = case
        .shape()
        .ok_or_else(|| Error::InvalidData(format!("case {} has no volumes", case.case_id)))?[2];
    if depth <= 2 * n {
        return Err(Error::TooShallow { depth, trim: n });
    }
    let range = s![.., .., n..depth - n];
    let mut out = case.clone();
    for v in out.volumes.values_mut() {
        v.data = v.data.slice(range).to_owned();
    }
    if let Some(mask) = &mut out.seg_mask {
        *mask = mask.slice(range).to_owned();
    }
    Ok(out)
}

/// Affine map of `[min, max]` onto `[0, 1]`; constant volumes become zeros.
pub fn normalize_intensity(v: &Volume) -> Volume {
    let (min, max) = v
        .data
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    if !(max > min) {
        return v.with_data(Array3::zeros(v.data.raw_dim()));
    }
    let scale = 1.0 / (max as f64 - min as f64);
    v.with_data(
        v.data
            .mapv(|x| (((x as f64 - min as f64) * scale) as f32).clamp(0.0, 1.0)),
    )
}

/// Full per-case pipeline: clip, trim, normalize.
pub fn preprocess_case(case: &MultiModalVolume, cfg: &PreprocessConfig) -> Result<MultiModalVolume> {
    cfg.validate()?;
    let mut clipped = case.clone();
    for v in clipped.volumes.values_mut() {
        *v = percentile_clip(v, cfg);
    }
    let mut trimmed = if cfg.trim_slices > 0 {
        trim_axial_slices(&clipped, cfg.trim_slices)?
    } else {
        clipped
    };
    for v in trimmed.volumes.values_mut() {
        *v = normalize_intensity(v);
    }
    Ok(trimmed)
}

/// Builds the 4-channel slice at axial index `f` (no channel masked yet).
pub fn slice_at(case: &MultiModalVolume, f: usize) -> Result<SliceSample> {
    let [h, w, d] = case
        .shape()
        .ok_or_else(|| Error::InvalidData(format!("case {} has no volumes", case.case_id)))?;
    if f >= d {
        return Err(Error::OutOfRange(format!("slice {f} of depth {d}")));
    }
    let mut x = Array3::<f32>::zeros((Modality::COUNT, h, w));
    for m in Modality::ALL {
        x.index_axis_mut(Axis(0), m.index())
            .assign(&case.volume(m)?.axial_slice(f));
    }
    let mask = match &case.seg_mask {
        Some(mask) => mask.slice(s![.., .., f]).mapv(f32::from),
        None => Array2::zeros((h, w)),
    };
    Ok(SliceSample {
        target: x.clone(),
        x,
        mask,
        missing: None,
        slice_index: f,
    })
}

/// One sample per axial slice, in ascending slice order.
pub fn extract_axial_slices(case: &MultiModalVolume) -> Result<Vec<SliceSample>> {
    let depth = case.shape().map(|s| s[2]).unwrap_or(0);
    (0..depth).map(|f| slice_at(case, f)).collect()
}

/// Concatenates `[H, W]` slices along depth into an `[H, W, D]` grid.
pub fn stack_axial_slices(slices: &[Array2<f32>]) -> Result<Array3<f32>> {
    let first = slices
        .first()
        .ok_or_else(|| Error::InvalidData("no slices to stack".into()))?;
    let (h, w) = first.dim();
    let mut out = Array3::zeros((h, w, slices.len()));
    for (f, sl) in slices.iter().enumerate() {
        if sl.dim() != (h, w) {
            return Err(Error::Shape(format!("slice {f} is {:?}, expected {:?}", sl.dim(), (h, w))));
        }
        out.slice_mut(s![.., .., f]).assign(sl);
    }
    Ok(out)
}

/// Zeroes the input channel of `missing`; the target keeps the original.
pub fn mask_modality(sample: &SliceSample, missing: Modality) -> SliceSample {
    let mut out = sample.clone();
    out.x = sample.target.clone();
    out.x.index_axis_mut(Axis(0), missing.index()).fill(0.0);
    out.missing = Some(missing);
    out
}

/// Draws the missing modality uniformly from the four channels.
pub fn draw_missing<R: Rng + ?Sized>(rng: &mut R) -> Modality {
    Modality::ALL[rng.random_range(0..Modality::COUNT)]
}

pub fn simulate_missing_modality(sample: &SliceSample, seed: u64) -> SliceSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    mask_modality(sample, draw_missing(&mut rng))
}
