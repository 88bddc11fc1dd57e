//! On-disk dataset layout: one directory per case holding gzipped NIfTI-1
//! volumes and a `manifest.json`.
//!
//! ```text
//! <dataset>/<case_id>/manifest.json
//! <dataset>/<case_id>/{t1ce,t1w,flair,t2w}.nii.gz
//! <dataset>/<case_id>/seg.nii.gz            (optional)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, Ix3};
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use nifti::writer::WriterOptions;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::PreprocessConfig;
use crate::types::{binarize_mask, Modality, MultiModalVolume, Volume, VolumeMeta};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
}

/// Preprocessing that has been applied to the stored volumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub config: PreprocessConfig,
    /// Human-readable output range, e.g. `"[0,1]"`.
    pub intensity_range: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseManifest {
    pub case_id: String,
    pub split: Split,
    pub modalities: BTreeMap<Modality, String>,
    #[serde(default)]
    pub mask: Option<String>,
    #[serde(default)]
    pub preprocessing: Option<PreprocessRecord>,
}

fn header_for(meta: &VolumeMeta) -> NiftiHeader {
    let mut hdr = NiftiHeader::default();
    hdr.pixdim = [1.0, meta.spacing[0], meta.spacing[1], meta.spacing[2], 1.0, 1.0, 1.0, 1.0];
    hdr.sform_code = 1;
    hdr.qform_code = 0;
    hdr.srow_x = meta.affine[0];
    hdr.srow_y = meta.affine[1];
    hdr.srow_z = meta.affine[2];
    hdr.xyzt_units = 2;
    hdr
}

fn meta_from(hdr: &NiftiHeader) -> VolumeMeta {
    let mut meta = VolumeMeta {
        spacing: [hdr.pixdim[1], hdr.pixdim[2], hdr.pixdim[3]],
        ..VolumeMeta::default()
    };
    if hdr.sform_code > 0 {
        meta.affine[0] = hdr.srow_x;
        meta.affine[1] = hdr.srow_y;
        meta.affine[2] = hdr.srow_z;
    } else {
        for i in 0..3 {
            meta.affine[i] = [0.0; 4];
            meta.affine[i][i] = meta.spacing[i];
        }
    }
    meta
}

fn read_grid(path: &Path) -> Result<(Array3<f32>, VolumeMeta)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let obj = ReaderOptions::new().read_file(path)?;
    let meta = meta_from(obj.header());
    let data = obj.into_volume().into_ndarray::<f32>()?;
    let data = data
        .into_dimensionality::<Ix3>()
        .map_err(|e| Error::Shape(format!("{}: expected a 3D volume ({e})", path.display())))?;
    Ok((data.as_standard_layout().to_owned(), meta))
}

pub fn read_volume(path: &Path, modality: Modality) -> Result<Volume> {
    let (data, meta) = read_grid(path)?;
    Ok(Volume { data, modality, meta })
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    write_grid(path, &v.data, &v.meta)
}

pub fn write_grid(path: &Path, data: &Array3<f32>, meta: &VolumeMeta) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let hdr = header_for(meta);
    WriterOptions::new(path).reference_header(&hdr).write_nifti(data)?;
    Ok(())
}

/// Reads a label map and binarizes it (any label > 0 becomes 1).
pub fn read_mask(path: &Path) -> Result<Array3<u8>> {
    Ok(binarize_mask(&read_grid(path)?.0))
}

pub fn write_mask(path: &Path, mask: &Array3<u8>, meta: &VolumeMeta) -> Result<()> {
    write_grid(path, &mask.mapv(f32::from), meta)
}

/// Writes a case directory and returns the manifest that was stored.
pub fn write_case(
    dir: &Path,
    case: &MultiModalVolume,
    split: Split,
    preprocessing: Option<PreprocessRecord>,
) -> Result<CaseManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut modalities = BTreeMap::new();
    for (m, v) in &case.volumes {
        let name = format!("{m}.nii.gz");
        write_volume(&dir.join(&name), v)?;
        modalities.insert(*m, name);
    }
    let mask = match &case.seg_mask {
        Some(mask) => {
            let meta = case.volumes.values().next().map(|v| v.meta.clone()).unwrap_or_default();
            write_mask(&dir.join("seg.nii.gz"), mask, &meta)?;
            Some("seg.nii.gz".to_string())
        }
        None => None,
    };
    let manifest = CaseManifest {
        case_id: case.case_id.clone(),
        split,
        modalities,
        mask,
        preprocessing,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CaseManifest> {
    read_json(&dir.join(MANIFEST_FILE))
}

pub fn read_case(dir: &Path) -> Result<(MultiModalVolume, CaseManifest)> {
    let manifest = read_manifest(dir)?;
    let mut volumes = BTreeMap::new();
    for (m, file) in &manifest.modalities {
        volumes.insert(*m, read_volume(&dir.join(file), *m)?);
    }
    let seg_mask = match &manifest.mask {
        Some(file) => Some(read_mask(&dir.join(file))?),
        None => None,
    };
    let case = MultiModalVolume {
        case_id: manifest.case_id.clone(),
        volumes,
        seg_mask,
    };
    Ok((case, manifest))
}

/// Case directories under `root` (those holding a manifest), sorted by name,
/// optionally restricted to one split.
pub fn list_cases(root: &Path, split: Option<Split>) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(root, e))?.path();
        if !path.join(MANIFEST_FILE).is_file() {
            continue;
        }
        if let Some(split) = split {
            if read_manifest(&path)?.split != split {
                continue;
            }
        }
        dirs.push(path);
    }
    dirs.sort();
    Ok(dirs)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
