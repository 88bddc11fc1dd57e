//! Overlapping depth windows, sub-volume extraction, blended stitching and
//! whole-volume refinement.

use candle_core::{Device, Tensor};
use ndarray::{s, Array3, ArrayView3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::{no_grad, CenModel};
use crate::types::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Blend {
    /// Plain average over covering windows.
    #[default]
    Uniform,
    /// Triangular ramp peaking at the window centre.
    Ramp,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub depth: usize,
    pub window_depth: usize,
    pub stride: usize,
    pub starts: Vec<usize>,
    pub blend: Blend,
}

/// Windows of depth `floor(D/s)` with stride `floor(D/(2s))` (at least 1).
pub fn plan_windows(depth: usize, s: usize) -> Result<WindowPlan> {
    if s == 0 {
        return Err(Error::Config("subvolume factor s must be >= 1".into()));
    }
    let w = depth / s;
    let stride = (depth / (2 * s)).max(1);
    plan_windows_with(depth, w, stride, Blend::Uniform)
}

/// Plan with explicit window depth and stride. The last window is end-aligned.
pub fn plan_windows_with(depth: usize, window_depth: usize, stride: usize, blend: Blend) -> Result<WindowPlan> {
    if window_depth == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "window depth {window_depth} and stride {stride} must be >= 1"
        )));
    }
    if stride > window_depth {
        return Err(Error::Config(format!(
            "stride {stride} exceeds window depth {window_depth}; some slices would never be refined"
        )));
    }
    if depth < window_depth {
        return Err(Error::Shape(format!(
            "depth {depth} is smaller than the window depth {window_depth}; pad the volume along depth"
        )));
    }
    let mut starts: Vec<usize> = (0..=depth - window_depth).step_by(stride).collect();
    let last = depth - window_depth;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    Ok(WindowPlan {
        depth,
        window_depth,
        stride,
        starts,
        blend,
    })
}

impl WindowPlan {
    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Unnormalized weight of position `i` inside a window.
    fn raw_weight(&self, i: usize) -> f64 {
        match self.blend {
            Blend::Uniform => 1.0,
            Blend::Ramp => (i + 1).min(self.window_depth - i) as f64,
        }
    }

    /// Sum of raw weights covering each depth index.
    fn coverage(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.depth];
        for &s in &self.starts {
            for i in 0..self.window_depth {
                total[s + i] += self.raw_weight(i);
            }
        }
        total
    }

    /// Normalized per-window, per-position blend weights.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let cov = self.coverage();
        self.starts
            .iter()
            .map(|&s| (0..self.window_depth).map(|i| self.raw_weight(i) / cov[s + i]).collect())
            .collect()
    }

    /// Per-depth sum of normalized weights (all ones for a valid plan).
    pub fn weight_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.depth];
        for (w, &s) in self.weights().iter().zip(&self.starts) {
            for (i, wi) in w.iter().enumerate() {
                sums[s + i] += wi;
            }
        }
        sums
    }
}

/// Depth slices `[start, start + w_d)` as a view.
pub fn extract_subvolume(v: &Array3<f32>, start: usize, w_d: usize) -> Result<ArrayView3<'_, f32>> {
    let d = v.len_of(Axis(2));
    if w_d == 0 || start + w_d > d {
        return Err(Error::OutOfRange(format!(
            "window [{start}, {}) outside depth {d}",
            start + w_d
        )));
    }
    Ok(v.slice(s![.., .., start..start + w_d]))
}

/// Blends one refined sub-volume per planned window into a full volume.
pub fn stitch_subvolumes(plan: &WindowPlan, subs: &[Array3<f32>]) -> Result<Array3<f32>> {
    if subs.len() != plan.len() {
        return Err(Error::Shape(format!(
            "{} sub-volumes for a plan of {} windows",
            subs.len(),
            plan.len()
        )));
    }
    let (h, w, _) = subs.first().map(|s| s.dim()).unwrap_or((0, 0, 0));
    let mut acc = Array3::<f64>::zeros((h, w, plan.depth));
    for ((sub, &start), weights) in subs.iter().zip(&plan.starts).zip(plan.weights()) {
        if sub.dim() != (h, w, plan.window_depth) {
            return Err(Error::Shape(format!(
                "sub-volume {:?}, expected {:?}",
                sub.dim(),
                (h, w, plan.window_depth)
            )));
        }
        for (i, wi) in weights.iter().enumerate() {
            let mut dst = acc.index_axis_mut(Axis(2), start + i);
            dst.zip_mut_with(&sub.index_axis(Axis(2), i), |a, &b| *a += wi * b as f64);
        }
    }
    Ok(acc.mapv(|x| x as f32))
}

/// Anything that maps an `(H, W, w_d)` sub-volume to one of the same shape.
pub trait SubvolumeRefiner {
    fn refine(&self, sub: ArrayView3<'_, f32>) -> Result<Array3<f32>>;
}

impl<F> SubvolumeRefiner for F
where
    F: Fn(ArrayView3<'_, f32>) -> Result<Array3<f32>>,
{
    fn refine(&self, sub: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
        self(sub)
    }
}

/// `(H, W, D)` grid to a `[1, 1, D, H, W]` tensor.
pub fn grid_to_tensor(v: ArrayView3<'_, f32>, device: &Device) -> Result<Tensor> {
    let (h, w, d) = v.dim();
    let data: Vec<f32> = v.permuted_axes([2, 0, 1]).iter().copied().collect();
    Ok(Tensor::from_vec(data, (1, 1, d, h, w), device)?)
}

/// Inverse of [`grid_to_tensor`] for one batch element of `[B, 1, D, H, W]`.
pub fn tensor_to_grid(t: &Tensor) -> Result<Array3<f32>> {
    let (_, _, d, h, w) = t.dims5()?;
    let data = t.flatten_all()?.to_vec1::<f32>()?;
    let dhw = Array3::from_shape_vec((d, h, w), data).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(dhw.permuted_axes([1, 2, 0]).as_standard_layout().to_owned())
}

impl SubvolumeRefiner for CenModel {
    fn refine(&self, sub: ArrayView3<'_, f32>) -> Result<Array3<f32>> {
        no_grad(|| {
            let x = grid_to_tensor(sub, self.params().device())?;
            tensor_to_grid(&self.forward(&x)?)
        })
    }
}

/// Plan, refine each window, and stitch back to full depth.
pub fn refine_volume(v: &Volume, refiner: &dyn SubvolumeRefiner, plan: &WindowPlan) -> Result<Volume> {
    if plan.depth != v.depth() {
        return Err(Error::Shape(format!(
            "plan for depth {} applied to a volume of depth {}",
            plan.depth,
            v.depth()
        )));
    }
    let subs = plan
        .starts
        .iter()
        .map(|&s| refiner.refine(extract_subvolume(&v.data, s, plan.window_depth)?))
        .collect::<Result<Vec<_>>>()?;
    let out = stitch_subvolumes(plan, &subs)?.mapv(|x| x.clamp(0.0, 1.0));
    Ok(v.with_data(out))
}
