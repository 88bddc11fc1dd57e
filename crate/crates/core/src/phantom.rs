//! Synthetic multi-modal head phantoms.
//!
//! Each voxel carries three latent tissue properties in `[0,1]`. Every
//! modality is a fixed non-negative linear mix of those properties, so any
//! three modalities determine the fourth exactly (up to added noise). Row sums
//! of the mixing matrix stay below one, keeping noise-free intensities inside
//! `[0,1]` without clipping.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{write_case, CaseManifest, Split};
use crate::types::{Modality, MultiModalVolume, Volume};

/// Rows follow the canonical modality order, columns the tissue properties.
pub const MIXING: [[f64; 3]; 4] = [
    [0.25, 0.55, 0.20],
    [0.30, 0.60, 0.05],
    [0.35, 0.15, 0.45],
    [0.20, 0.05, 0.70],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    /// Tissue ellipsoids placed inside the head.
    pub regions: usize,
    pub lesions: usize,
    /// Lesion semi-axis as a fraction of the head half-extent.
    pub lesion_radius: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            depth: 32,
            regions: 6,
            lesions: 1,
            lesion_radius: 0.18,
            noise_std: 0.01,
            seed: 0,
        }
    }
}

struct Ellipsoid {
    center: [f64; 3],
    axes: [f64; 3],
    props: [f64; 3],
}

impl Ellipsoid {
    /// Soft membership: 1 inside, 0 outside, linear ramp over `edge` in normalized radius.
    fn weight(&self, p: [f64; 3], edge: f64) -> f64 {
        let r2: f64 = (0..3).map(|a| ((p[a] - self.center[a]) / self.axes[a]).powi(2)).sum();
        ((1.0 - r2.sqrt()) / edge).clamp(0.0, 1.0)
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|b| (b + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

/// Normalized coordinate in `[-1, 1]` of voxel `i` along an axis of length `n`.
fn coord(i: usize, n: usize) -> f64 {
    (i as f64 + 0.5) / n as f64 * 2.0 - 1.0
}

/// Noise-free tissue property maps plus the lesion mask.
fn property_maps(spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> (Vec<Array3<f64>>, Array3<u8>) {
    let shape = (spec.height, spec.width, spec.depth);
    let head = Ellipsoid {
        center: [0.0; 3],
        axes: [0.85, 0.78, 0.9].map(|a| a * rng.random_range(0.95..=1.05)),
        props: jitter(rng, [0.55, 0.5, 0.35], 0.05),
    };
    let regions: Vec<Ellipsoid> = (0..spec.regions)
        .map(|_| Ellipsoid {
            center: [0.45, 0.45, 0.5].map(|r| rng.random_range(-r..=r) * 0.85),
            axes: [0; 3].map(|_| rng.random_range(0.12..=0.35)),
            props: [0; 3].map(|_| rng.random_range(0.1..=0.95)),
        })
        .collect();
    let lesions: Vec<Ellipsoid> = (0..spec.lesions)
        .map(|_| Ellipsoid {
            center: [0.35, 0.35, 0.35].map(|r| rng.random_range(-r..=r)),
            axes: [0; 3].map(|_| spec.lesion_radius * rng.random_range(0.8..=1.2)),
            props: jitter(rng, [0.85, 0.15, 0.95], 0.05),
        })
        .collect();
    let freq = [0; 3].map(|_| rng.random_range(0.5..=2.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut props = vec![Array3::<f64>::zeros(shape); 3];
    let mut mask = Array3::<u8>::zeros(shape);
    for i in 0..spec.height {
        for j in 0..spec.width {
            for k in 0..spec.depth {
                let p = [coord(i, spec.height), coord(j, spec.width), coord(k, spec.depth)];
                let w_head = head.weight(p, 0.08);
                if w_head == 0.0 {
                    continue;
                }
                let mut v = head.props;
                for r in &regions {
                    let w = r.weight(p, 0.25) * w_head;
                    for a in 0..3 {
                        v[a] += (r.props[a] - v[a]) * w;
                    }
                }
                let mut in_lesion = false;
                for l in &lesions {
                    let w = l.weight(p, 0.3) * w_head;
                    for a in 0..3 {
                        v[a] += (l.props[a] - v[a]) * w;
                    }
                    in_lesion |= w > 0.5;
                }
                let texture = 1.0
                    + 0.08 * (std::f64::consts::TAU * (freq[0] * p[0] + freq[1] * p[1] + freq[2] * p[2]) + phase).sin();
                for a in 0..3 {
                    props[a][[i, j, k]] = (v[a] * w_head * texture).clamp(0.0, 1.0);
                }
                mask[[i, j, k]] = u8::from(in_lesion && w_head > 0.5);
            }
        }
    }
    if spec.lesions > 0 && mask.iter().all(|&m| m == 0) {
        let c = lesions[0].center;
        let idx = |c: f64, n: usize| (((c + 1.0) / 2.0 * n as f64) as usize).min(n - 1);
        mask[[idx(c[0], spec.height), idx(c[1], spec.width), idx(c[2], spec.depth)]] = 1;
    }
    (props, mask)
}

/// Generates one deterministic phantom case from `spec`.
pub fn generate_phantom_case(spec: &PhantomSpec) -> Result<MultiModalVolume> {
    if spec.height == 0 || spec.width == 0 || spec.depth == 0 {
        return Err(Error::Config(format!(
            "phantom shape must be positive, got {}x{}x{}",
            spec.height, spec.width, spec.depth
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (props, mask) = property_maps(spec, &mut rng);
    let shape = (spec.height, spec.width, spec.depth);
    let volumes = Modality::ALL.map(|m| {
        let row = MIXING[m.index()];
        let mut data = Array3::<f32>::zeros(shape);
        for ((idx, out), _) in data.indexed_iter_mut().zip(0..) {
            let clean: f64 = (0..3).map(|a| row[a] * props[a][idx]).sum();
            let noisy = clean + spec.noise_std * rng.sample::<f64, _>(StandardNormal);
            *out = noisy.clamp(0.0, 1.0) as f32;
        }
        Volume::new(data, m)
    });
    Ok(MultiModalVolume::new(format!("phantom-{:04}", spec.seed), volumes, Some(mask)))
}

/// Writes `n` phantom cases (seeds `spec.seed..spec.seed+n`) into `root`.
/// The last `ceil(n * val_fraction)` cases are tagged as validation.
pub fn write_phantom_dataset(
    root: &Path,
    n: usize,
    spec: &PhantomSpec,
    val_fraction: f64,
) -> Result<Vec<CaseManifest>> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config(format!("val_fraction must lie in [0,1), got {val_fraction}")));
    }
    let n_val = (n as f64 * val_fraction).ceil() as usize;
    (0..n)
        .map(|i| {
            let case_spec = PhantomSpec {
                seed: spec.seed + i as u64,
                ..spec.clone()
            };
            let case = generate_phantom_case(&case_spec)?;
            let split = if i + n_val >= n { Split::Validation } else { Split::Train };
            write_case(&root.join(&case.case_id), &case, split, None)
        })
        .collect()
}
