//! Scoring: volumetric SSIM, inter-slice coherence, difference maps, overlap
//! metrics for externally supplied masks, and per-case/aggregate reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{Device, Tensor};
use image::GrayImage;
use ndarray::{Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::Synthesizer;
use crate::losses::{scalar, ssim};
use crate::preprocessing::percentile_sorted;
use crate::training::derive_seed;
use crate::types::{Modality, MultiModalVolume, Volume};
use crate::volumetric::{refine_volume, SubvolumeRefiner, WindowPlan};

/// Upper end of the fixed difference-map display scale.
pub const DIFF_SCALE_MAX: f32 = 0.5;
pub const DIFF_DIR: &str = "diff_scale0-0.5";

fn grid_tensor(a: &Array3<f32>) -> Result<Tensor> {
    let (h, w, d) = a.dim();
    let data: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    Ok(Tensor::from_vec(data, (1, h, w, d), &Device::Cpu)?)
}

/// Windowed SSIM over the whole volume (11³ Gaussian window).
pub fn ssim_3d(pred: &Volume, gt: &Volume) -> Result<f64> {
    ssim_grid(&pred.data, &gt.data)
}

pub fn ssim_grid(pred: &Array3<f32>, gt: &Array3<f32>) -> Result<f64> {
    if pred.dim() != gt.dim() {
        return Err(Error::Shape(format!("ssim_3d: {:?} vs {:?}", pred.dim(), gt.dim())));
    }
    scalar(&ssim(&grid_tensor(pred)?, &grid_tensor(gt)?)?.mean_all()?)
}

/// Mean absolute difference between neighbouring depth slices.
pub fn coherence_metric(v: &Array3<f32>) -> f64 {
    let d = v.len_of(Axis(2));
    if d < 2 {
        return 0.0;
    }
    let mut sum = 0.0;
    for k in 0..d - 1 {
        let a = v.index_axis(Axis(2), k);
        let b = v.index_axis(Axis(2), k + 1);
        sum += a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>();
    }
    let (h, w, _) = v.dim();
    sum / (h * w * (d - 1)) as f64
}

/// `|a − b|` on the fixed scale `[0, 0.5] → [0, 255]`.
pub fn difference_map(a: ArrayView2<'_, f32>, b: ArrayView2<'_, f32>) -> Result<GrayImage> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("difference map: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (h, w) = a.dim();
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let (i, j) = (y as usize, x as usize);
        let d = (a[[i, j]] - b[[i, j]]).abs() / DIFF_SCALE_MAX;
        image::Luma([(d.clamp(0.0, 1.0) * 255.0).round() as u8])
    }))
}

/// Decodes a difference map back to `|a − b|` (quantized).
pub fn read_difference_map(path: &Path) -> Result<ndarray::Array2<f32>> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(ndarray::Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32)[0] as f32 / 255.0 * DIFF_SCALE_MAX
    }))
}

/// Writes the O-M (and, with a refined volume, O-C and M-C) maps for one
/// axial slice. Files land in `dir/diff_scale0-0.5/{case}_{modality}_{pair}.png`.
pub fn write_difference_maps(
    dir: &Path,
    case_id: &str,
    original: &Volume,
    mmg: &Volume,
    cen: Option<&Volume>,
    slice: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let d = original.depth();
    let f = slice.unwrap_or(d / 2);
    if f >= d {
        return Err(Error::OutOfRange(format!("slice {f} of depth {d}")));
    }
    let out_dir = dir.join(DIFF_DIR);
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let o = original.axial_slice(f);
    let m = mmg.axial_slice(f);
    let mut pairs = vec![("O-M", difference_map(o, m)?)];
    if let Some(c) = cen {
        let c = c.axial_slice(f);
        pairs.push(("O-C", difference_map(o, c)?));
        pairs.push(("M-C", difference_map(m, c)?));
    }
    let mut paths = Vec::new();
    for (pair, img) in pairs {
        let path = out_dir.join(format!("{case_id}_{}_{pair}.png", original.modality));
        img.save(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Dice overlap of two binary masks; two empty masks score 1.
pub fn dice(a: &Array3<u8>, b: &Array3<u8>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("dice: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b.iter()) {
        na += (x > 0) as usize;
        nb += (y > 0) as usize;
        inter += (x > 0 && y > 0) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

fn surface(m: &Array3<u8>) -> Vec<[usize; 3]> {
    let (h, w, d) = m.dim();
    let mut pts = Vec::new();
    for ((i, j, k), &v) in m.indexed_iter() {
        if v == 0 {
            continue;
        }
        let border = i == 0 || j == 0 || k == 0 || i + 1 == h || j + 1 == w || k + 1 == d;
        let open = border
            || m[[i - 1, j, k]] == 0
            || m[[i + 1, j, k]] == 0
            || m[[i, j - 1, k]] == 0
            || m[[i, j + 1, k]] == 0
            || m[[i, j, k - 1]] == 0
            || m[[i, j, k + 1]] == 0;
        if open {
            pts.push([i, j, k]);
        }
    }
    pts
}

fn directed(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f32; 3]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| {
                    (0..3)
                        .map(|a| ((p[a] as f64 - q[a] as f64) * spacing[a] as f64).powi(2))
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect()
}

/// 95th-percentile symmetric surface distance in physical units: the larger
/// of the two directed 95th percentiles. `None` if either mask is empty.
pub fn hd95(a: &Array3<u8>, b: &Array3<u8>, spacing: [f32; 3]) -> Result<Option<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("hd95: {:?} vs {:?}", a.dim(), b.dim())));
    }
    let (sa, sb) = (surface(a), surface(b));
    if sa.is_empty() || sb.is_empty() {
        return Ok(None);
    }
    let p95 = |mut d: Vec<f64>| {
        d.sort_by(f64::total_cmp);
        percentile_sorted(&d, 95.0)
    };
    Ok(Some(p95(directed(&sa, &sb, spacing)).max(p95(directed(&sb, &sa, spacing)))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceReport {
    pub original: f64,
    pub mmg: f64,
    pub cen: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub case_id: String,
    pub missing: Modality,
    pub ssim_mmg: f64,
    pub ssim_cen: Option<f64>,
    /// SSIM of an all-zeros prediction against the same target.
    pub ssim_zero_baseline: f64,
    pub coherence: CoherenceReport,
    pub runtime_secs: f64,
    pub config_hash: String,
    pub seed: u64,
}

pub struct EvalOutcome {
    pub report: EvalReport,
    pub mmg: Volume,
    pub cen: Option<Volume>,
}

/// Seed for synthesizing `missing` of `case_id` under a root seed.
pub fn case_seed(root: u64, case_id: &str, missing: Modality) -> u64 {
    derive_seed(root, &format!("eval/{case_id}/{missing}"))
}

/// Synthesizes `missing` from the other three channels, optionally refines
/// it, and scores both against the held-back ground truth.
pub fn evaluate_case(
    case: &MultiModalVolume,
    missing: Modality,
    synth: &dyn Synthesizer,
    refiner: Option<(&dyn SubvolumeRefiner, &WindowPlan)>,
    root_seed: u64,
    config_hash: &str,
) -> Result<EvalOutcome> {
    let started = Instant::now();
    let seed = case_seed(root_seed, &case.case_id, missing);
    let masked = case.with_zeroed(missing);
    let mmg = synth.synthesize(&masked, missing, seed)?;
    let cen = match refiner {
        Some((r, plan)) => Some(refine_volume(&mmg, r, plan)?),
        None => None,
    };
    let runtime_secs = started.elapsed().as_secs_f64();

    let truth = case.volume(missing)?;
    if mmg.shape() != truth.shape() {
        return Err(Error::Shape(format!(
            "synthesized {:?} vs ground truth {:?}",
            mmg.shape(),
            truth.shape()
        )));
    }
    let zeros = truth.with_data(Array3::zeros(truth.data.dim()));
    let report = EvalReport {
        case_id: case.case_id.clone(),
        missing,
        ssim_mmg: ssim_3d(&mmg, truth)?,
        ssim_cen: cen.as_ref().map(|c| ssim_3d(c, truth)).transpose()?,
        ssim_zero_baseline: ssim_3d(&zeros, truth)?,
        coherence: CoherenceReport {
            original: coherence_metric(&truth.data),
            mmg: coherence_metric(&mmg.data),
            cen: cen.as_ref().map(|c| coherence_metric(&c.data)),
        },
        runtime_secs,
        config_hash: config_hash.to_string(),
        seed,
    };
    Ok(EvalOutcome { report, mmg, cen })
}

/// One row of the aggregate table: mean SSIM (%) per missing modality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub missing: Modality,
    pub cases: usize,
    pub mmg_ssim_pct: f64,
    pub cen_ssim_pct: Option<f64>,
}

pub const TABLE_HEADER: &str = "missing,cases,mmg_ssim_pct,mmg_cen_ssim_pct";

pub fn aggregate(reports: &[EvalReport]) -> Vec<TableRow> {
    let mut groups: BTreeMap<Modality, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        groups.entry(r.missing).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(missing, rs)| {
            let n = rs.len() as f64;
            let mmg = rs.iter().map(|r| r.ssim_mmg).sum::<f64>() / n * 100.0;
            let cen = rs
                .iter()
                .map(|r| r.ssim_cen)
                .collect::<Option<Vec<_>>>()
                .map(|v| v.iter().sum::<f64>() / n * 100.0);
            TableRow {
                missing,
                cases: rs.len(),
                mmg_ssim_pct: mmg,
                cen_ssim_pct: cen,
            }
        })
        .collect()
}

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = format!("{TABLE_HEADER}\n");
    for r in rows {
        let cen = r.cen_ssim_pct.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.missing, r.cases, r.mmg_ssim_pct, cen));
    }
    out
}

pub fn parse_table_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TABLE_HEADER) {
        return Err(Error::InvalidData("unexpected table header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::InvalidData(format!("bad table row {line:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TableRow {
                missing: f[0].parse().map_err(|_| bad())?,
                cases: f[1].parse().map_err(|_| bad())?,
                mmg_ssim_pct: f[2].parse().map_err(|_| bad())?,
                cen_ssim_pct: if f[3].is_empty() { None } else { Some(f[3].parse().map_err(|_| bad())?) },
            })
        })
        .collect()
}
