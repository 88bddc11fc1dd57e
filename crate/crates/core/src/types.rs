//! Domain types shared across the pipeline.
//!
//! Channel order is fixed as `(T1ce, T1w, Flair, T2w)`; every 4-channel
//! tensor in the crate uses this order.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    T1ce,
    T1w,
    Flair,
    T2w,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::T1ce, Modality::T1w, Modality::Flair, Modality::T2w];
    pub const COUNT: usize = 4;

    /// Channel index in the canonical order.
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::T1ce => "t1ce",
            Modality::T1w => "t1w",
            Modality::Flair => "flair",
            Modality::T2w => "t2w",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t1ce" | "t1c" => Ok(Modality::T1ce),
            "t1w" | "t1" | "t1n" => Ok(Modality::T1w),
            "flair" | "t2f" => Ok(Modality::Flair),
            "t2w" | "t2" => Ok(Modality::T2w),
            other => Err(Error::Config(format!("unknown modality '{other}'"))),
        }
    }
}

/// Voxel spacing (mm) and the voxel-to-world affine, carried through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub spacing: [f32; 3],
    pub affine: [[f32; 4]; 4],
}

impl Default for VolumeMeta {
    fn default() -> Self {
        let mut affine = [[0.0; 4]; 4];
        for (i, row) in affine.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            spacing: [1.0; 3],
            affine,
        }
    }
}

/// A single-modality scalar volume indexed `[h, w, d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<f32>,
    pub modality: Modality,
    pub meta: VolumeMeta,
}

impl Volume {
    pub fn new(data: Array3<f32>, modality: Modality) -> Self {
        Self {
            data,
            modality,
            meta: VolumeMeta::default(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        let (h, w, d) = self.data.dim();
        [h, w, d]
    }

    pub fn depth(&self) -> usize {
        self.data.dim().2
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn is_normalized(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }

    pub fn axial_slice(&self, f: usize) -> ArrayView2<'_, f32> {
        self.data.slice(s![.., .., f])
    }

    /// Same geometry and modality, different voxel values.
    pub fn with_data(&self, data: Array3<f32>) -> Self {
        Self {
            data,
            modality: self.modality,
            meta: self.meta.clone(),
        }
    }
}

/// Four co-registered modality volumes of one subject plus an optional lesion mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    pub case_id: String,
    pub volumes: BTreeMap<Modality, Volume>,
    pub seg_mask: Option<Array3<u8>>,
}

impl MultiModalVolume {
    pub fn new(case_id: impl Into<String>, volumes: [Volume; 4], seg_mask: Option<Array3<u8>>) -> Self {
        Self {
            case_id: case_id.into(),
            volumes: volumes.into_iter().map(|v| (v.modality, v)).collect(),
            seg_mask,
        }
    }

    pub fn volume(&self, m: Modality) -> Result<&Volume> {
        self.volumes
            .get(&m)
            .ok_or_else(|| Error::InvalidData(format!("case {} has no {m} volume", self.case_id)))
    }

    /// Shape of the first volume in canonical order.
    pub fn shape(&self) -> Option<[usize; 3]> {
        self.volumes.values().next().map(Volume::shape)
    }

    /// Copy with the given modality's voxels replaced by zeros.
    pub fn with_zeroed(&self, m: Modality) -> Self {
        let mut out = self.clone();
        if let Some(v) = out.volumes.get_mut(&m) {
            v.data.fill(0.0);
        }
        out
    }
}

/// Binarizes a label map: any label above zero becomes 1.
pub fn binarize_mask(labels: &Array3<f32>) -> Array3<u8> {
    labels.mapv(|v| u8::from(v > 0.0))
}

/// One 4-channel axial slice. `x` is the network input (channel-first,
/// `[4, H, W]`); `target` keeps the unmasked channels for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceSample {
    pub x: Array3<f32>,
    pub target: Array3<f32>,
    pub mask: Array2<f32>,
    pub missing: Option<Modality>,
    /// Zero-based axial index within the source volume.
    pub slice_index: usize,
}

impl SliceSample {
    pub fn height(&self) -> usize {
        self.x.dim().1
    }

    pub fn width(&self) -> usize {
        self.x.dim().2
    }
}

/// A failed invariant: `field` names the offending part, `rule` says what broke.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(field: &str, rule: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            rule: rule.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

/// Checks every structural invariant of a case and reports all violations.
/// Never fails; an empty list means the case is valid.
pub fn validate_case(case: &MultiModalVolume) -> Vec<Violation> {
    let mut out = Vec::new();
    if case.case_id.is_empty() {
        out.push(Violation::new("case_id", "must be non-empty"));
    }
    for m in Modality::ALL {
        if !case.volumes.contains_key(&m) {
            out.push(Violation::new("volumes.missing", format!("{m} volume absent")));
        }
    }
    for (key, v) in &case.volumes {
        if v.modality != *key {
            out.push(Violation::new(
                "volumes.modality",
                format!("volume keyed {key} is labelled {}", v.modality),
            ));
        }
    }
    let reference = case.volumes.values().next();
    if let Some(first) = reference {
        let shape = first.shape();
        if shape.iter().any(|&n| n == 0) {
            out.push(Violation::new("volumes.shape", format!("dimension of zero in {shape:?}")));
        }
        if case.volumes.values().any(|v| v.shape() != shape) {
            out.push(Violation::new("volumes.shape", "volumes differ in shape"));
        }
        if case.volumes.values().any(|v| v.meta != first.meta) {
            out.push(Violation::new("volumes.meta", "volumes differ in spacing or affine"));
        }
        if case.volumes.values().any(|v| !v.is_finite()) {
            out.push(Violation::new("volumes.values", "non-finite voxel"));
        }
        if let Some(mask) = &case.seg_mask {
            let (h, w, d) = mask.dim();
            if [h, w, d] != shape {
                out.push(Violation::new("seg_mask.shape", "mask shape differs from volumes"));
            }
        }
    }
    if let Some(mask) = &case.seg_mask {
        if mask.iter().any(|&v| v > 1) {
            out.push(Violation::new("seg_mask.values", "mask must contain only 0 and 1"));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(shape: (usize, usize, usize)) -> MultiModalVolume {
        let vols = Modality::ALL.map(|m| Volume::new(Array3::zeros(shape), m));
        MultiModalVolume::new("c0", vols, Some(Array3::zeros(shape)))
    }

    fn fields(v: &[Violation]) -> Vec<&str> {
        v.iter().map(|v| v.field.as_str()).collect()
    }

    #[test]
    fn valid_case_has_no_violations() {
        assert!(validate_case(&case((24, 24, 15))).is_empty());
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut c = case((24, 24, 15));
        c.volumes.get_mut(&Modality::Flair).unwrap().data = Array3::zeros((24, 24, 14));
        assert_eq!(fields(&validate_case(&c)), vec!["volumes.shape"]);
    }

    #[test]
    fn non_binary_mask_reported() {
        let mut c = case((8, 8, 4));
        c.seg_mask.as_mut().unwrap()[[1, 1, 1]] = 2;
        assert_eq!(fields(&validate_case(&c)), vec!["seg_mask.values"]);
    }

    #[test]
    fn missing_and_nan_reported() {
        let mut c = case((8, 8, 4));
        c.volumes.remove(&Modality::T2w);
        c.volumes.get_mut(&Modality::T1w).unwrap().data[[0, 0, 0]] = f32::NAN;
        let issues = validate_case(&c);
        let f = fields(&issues);
        assert!(f.contains(&"volumes.missing"));
        assert!(f.contains(&"volumes.values"));
    }

    #[test]
    fn validation_is_pure() {
        let mut c = case((8, 8, 4));
        c.seg_mask.as_mut().unwrap()[[0, 0, 0]] = 3;
        assert_eq!(validate_case(&c), validate_case(&c));
    }

    #[test]
    fn canonical_order_roundtrips_through_json() {
        let json = serde_json::to_string(&Modality::ALL).unwrap();
        assert_eq!(json, r#"["t1ce","t1w","flair","t2w"]"#);
        let back: [Modality; 4] = serde_json::from_str(&json).unwrap();
        assert_eq!(back, Modality::ALL);
        for (i, m) in Modality::ALL.iter().enumerate() {
            assert_eq!(m.index(), i);
            assert_eq!(Modality::from_index(i), Some(*m));
            assert_eq!(m.as_str().parse::<Modality>().unwrap(), *m);
        }
    }

    #[test]
    fn mask_binarization() {
        let labels = Array3::from_shape_vec((1, 1, 4), vec![0.0, 1.0, 2.0, 4.0]).unwrap();
        assert_eq!(binarize_mask(&labels).into_raw_vec_and_offset().0, vec![0, 1, 1, 1]);
    }
}
