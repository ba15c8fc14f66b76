//! Volume ingestion: NIfTI-1 image/label pairs and the raw fallback
//! directory format (`meta.json` + `image.raw` + `label.raw`).

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{OarsegError, Result};
use crate::volume::{check_pair, CtVolume, LabelVolume};

/// `meta.json` schema of the raw fallback format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawMeta {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
}

/// Loads one patient from either a raw-format directory or a NIfTI-1 pair.
///
/// Accepted `path` forms:
/// - a directory containing `meta.json`, `image.raw`, `label.raw`;
/// - an `<id>_image.nii[.gz]` file (the matching `<id>_label` is derived);
/// - a bare `<dir>/<id>` prefix for the NIfTI pair.
pub fn load_volume(path: impl AsRef<Path>) -> Result<(CtVolume, LabelVolume)> {
    let path = path.as_ref();
    if path.is_dir() {
        if path.join("meta.json").is_file() {
            return load_raw_patient(path);
        }
        return Err(OarsegError::Format {
            path: path.to_path_buf(),
            msg: "directory has no meta.json".into(),
        });
    }
    let s = path.to_string_lossy();
    if s.ends_with(".nii") || s.ends_with(".nii.gz") {
        let img = path.to_path_buf();
        let lbl = nifti_label_for_image(&img)?;
        return load_nifti_pair(&img, &lbl);
    }
    // Bare prefix: probe `<prefix>_image.nii(.gz)`.
    for ext in [".nii.gz", ".nii"] {
        let img = PathBuf::from(format!("{s}_image{ext}"));
        if img.is_file() {
            let lbl = nifti_label_for_image(&img)?;
            return load_nifti_pair(&img, &lbl);
        }
    }
    Err(OarsegError::MissingFile(path.to_path_buf()))
}

/// Lists patients under a dataset directory (raw subdirectories and/or
/// NIfTI pairs), sorted by patient id.
pub fn list_patients(dir: impl AsRef<Path>) -> Result<Vec<(String, PathBuf)>> {
    let dir = dir.as_ref();
    let mut out = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| OarsegError::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| OarsegError::io(dir, e))?;
        let p = entry.path();
        if p.is_dir() && p.join("meta.json").is_file() {
            let id = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            out.push((id, p));
        } else if p.is_file() {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            for suffix in ["_image.nii.gz", "_image.nii"] {
                if let Some(id) = name.strip_suffix(suffix) {
                    out.push((id.to_string(), p.clone()));
                }
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every patient under `dir`.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<(CtVolume, LabelVolume)>> {
    let mut out = Vec::new();
    for (id, path) in list_patients(&dir)? {
        let (mut ct, mut lbl) = load_volume(&path)?;
        ct.patient_id = id.clone();
        lbl.patient_id = id;
        out.push((ct, lbl));
    }
    Ok(out)
}

fn nifti_label_for_image(img: &Path) -> Result<PathBuf> {
    let s = img.to_string_lossy().replace("_image.nii", "_label.nii");
    let lbl = PathBuf::from(s);
    if lbl.is_file() {
        Ok(lbl)
    } else {
        Err(OarsegError::MissingFile(lbl))
    }
}

// ---------------------------------------------------------------------------
// Raw fallback format
// ---------------------------------------------------------------------------

fn read_i16_le(path: &Path, n: usize) -> Result<Vec<i16>> {
    let bytes = fs::read(path).map_err(|e| OarsegError::io(path, e))?;
    if bytes.len() != n * 2 {
        return Err(OarsegError::Format {
            path: path.to_path_buf(),
            msg: format!("expected {} bytes, found {}", n * 2, bytes.len()),
        });
    }
    Ok(bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect())
}

pub fn load_raw_patient(dir: &Path) -> Result<(CtVolume, LabelVolume)> {
    let meta_path = dir.join("meta.json");
    let meta_file = fs::File::open(&meta_path).map_err(|e| OarsegError::io(&meta_path, e))?;
    let meta: RawMeta = serde_json::from_reader(meta_file).map_err(|e| OarsegError::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    if meta.dtype != "int16-le" {
        return Err(OarsegError::Format {
            path: meta_path,
            msg: format!("unsupported dtype {:?}", meta.dtype),
        });
    }
    let [s, h, w] = meta.shape;
    let n = s * h * w;
    let image = read_i16_le(&dir.join("image.raw"), n)?;
    let label = read_i16_le(&dir.join("label.raw"), n)?;

    let patient_id = dir
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .unwrap_or_else(|| "patient".into());

    let voxels = Array3::from_shape_vec((s, h, w), image)
        .map_err(|e| OarsegError::ShapeMismatch(e.to_string()))?;
    let mut codes = Vec::with_capacity(n);
    for v in label {
        if !(0..=6).contains(&v) {
            return Err(OarsegError::InvalidOrganCode(v as i64));
        }
        codes.push(v as u8);
    }
    let labels = Array3::from_shape_vec((s, h, w), codes)
        .map_err(|e| OarsegError::ShapeMismatch(e.to_string()))?;

    let ct = CtVolume::new(patient_id.clone(), voxels, meta.spacing)?;
    let lbl = LabelVolume::new(patient_id, labels)?;
    check_pair(&ct, &lbl)?;
    Ok((ct, lbl))
}

pub fn write_raw_patient(dir: &Path, ct: &CtVolume, labels: &LabelVolume) -> Result<()> {
    check_pair(ct, labels)?;
    fs::create_dir_all(dir).map_err(|e| OarsegError::io(dir, e))?;
    let (s, h, w) = ct.shape();
    let meta = RawMeta {
        shape: [s, h, w],
        spacing: ct.spacing,
        dtype: "int16-le".into(),
    };
    let meta_path = dir.join("meta.json");
    let json = serde_json::to_string_pretty(&meta).map_err(|e| OarsegError::Json {
        path: meta_path.clone(),
        source: e,
    })?;
    fs::write(&meta_path, json).map_err(|e| OarsegError::io(&meta_path, e))?;

    let mut img_bytes = Vec::with_capacity(ct.voxels.len() * 2);
    for &v in ct.voxels.iter() {
        img_bytes.extend_from_slice(&v.to_le_bytes());
    }
    let img_path = dir.join("image.raw");
    fs::write(&img_path, img_bytes).map_err(|e| OarsegError::io(&img_path, e))?;

    let mut lbl_bytes = Vec::with_capacity(labels.labels.len() * 2);
    for &c in labels.labels.iter() {
        lbl_bytes.extend_from_slice(&(c as i16).to_le_bytes());
    }
    let lbl_path = dir.join("label.raw");
    fs::write(&lbl_path, lbl_bytes).map_err(|e| OarsegError::io(&lbl_path, e))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Minimal NIfTI-1 support (single-file .nii / .nii.gz, little-endian)
// ---------------------------------------------------------------------------

const NIFTI1_HEADER_LEN: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| OarsegError::io(path, e))?;
    if path.to_string_lossy().ends_with(".gz") {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| OarsegError::io(path, e))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

struct NiftiData {
    shape: (usize, usize, usize),
    spacing: [f64; 3],
    /// Raw values after scl_slope/scl_inter, rounded to the nearest integer.
    values: Vec<f64>,
}

fn parse_nifti(path: &Path) -> Result<NiftiData> {
    let bytes = read_maybe_gz(path)?;
    if bytes.len() < NIFTI1_HEADER_LEN {
        return Err(OarsegError::Format {
            path: path.to_path_buf(),
            msg: "file shorter than a NIfTI-1 header".into(),
        });
    }
    let magic = &bytes[344..348];
    if magic != b"n+1\0" {
        return Err(OarsegError::Format {
            path: path.to_path_buf(),
            msg: "not a single-file NIfTI-1 volume (magic != n+1)".into(),
        });
    }
    let i16_at = |off: usize| i16::from_le_bytes([bytes[off], bytes[off + 1]]);
    let f32_at = |off: usize| {
        f32::from_le_bytes([bytes[off], bytes[off + 1], bytes[off + 2], bytes[off + 3]])
    };
    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(OarsegError::Format {
            path: path.to_path_buf(),
            msg: format!("unsupported endianness or dim[0]={ndim}"),
        });
    }
    // dim[1..3] are (x, y, z) sizes in NIfTI order; we store slice-major.
    let nx = i16_at(42) as usize;
    let ny = i16_at(44) as usize;
    let nz = if ndim >= 3 { i16_at(46) as usize } else { 1 };
    let datatype = i16_at(70);
    let dx = f32_at(80) as f64;
    let dy = f32_at(84) as f64;
    let dz = if ndim >= 3 { f32_at(88) as f64 } else { 1.0 };
    let vox_offset = f32_at(108) as usize;
    let scl_slope = f32_at(112) as f64;
    let scl_inter = f32_at(116) as f64;
    let slope = if scl_slope == 0.0 { 1.0 } else { scl_slope };

    let n = nx * ny * nz;
    let data = &bytes[vox_offset.max(NIFTI1_HEADER_LEN)..];
    let mut values = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => {
            if data.len() < n {
                return Err(short_data(path, n, data.len()));
            }
            values.extend(data[..n].iter().map(|&b| b as f64 * slope + scl_inter));
        }
        DT_INT16 => {
            if data.len() < n * 2 {
                return Err(short_data(path, n * 2, data.len()));
            }
            values.extend(
                data[..n * 2]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 * slope + scl_inter),
            );
        }
        DT_FLOAT32 => {
            if data.len() < n * 4 {
                return Err(short_data(path, n * 4, data.len()));
            }
            values.extend(data[..n * 4].chunks_exact(4).map(|c| {
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64 * slope + scl_inter
            }));
        }
        other => {
            return Err(OarsegError::Format {
                path: path.to_path_buf(),
                msg: format!("unsupported NIfTI datatype {other}"),
            })
        }
    }
    // NIfTI data is x-fastest, which is exactly row-major (z, y, x).
    Ok(NiftiData {
        shape: (nz, ny, nx),
        spacing: [dz, dy, dx],
        values,
    })
}

fn short_data(path: &Path, need: usize, got: usize) -> OarsegError {
    OarsegError::Format {
        path: path.to_path_buf(),
        msg: format!("data section too short: need {need} bytes, got {got}"),
    }
}

pub fn load_nifti_pair(img_path: &Path, lbl_path: &Path) -> Result<(CtVolume, LabelVolume)> {
    let img = parse_nifti(img_path)?;
    let lbl = parse_nifti(lbl_path)?;
    if img.shape != lbl.shape {
        return Err(OarsegError::ShapeMismatch(format!(
            "image {:?} vs labels {:?}",
            img.shape, lbl.shape
        )));
    }
    let patient_id = img_path
        .file_name()
        .map(|f| f.to_string_lossy().into_owned())
        .and_then(|f| {
            f.strip_suffix("_image.nii.gz")
                .or_else(|| f.strip_suffix("_image.nii"))
                .map(str::to_string)
        })
        .unwrap_or_else(|| "patient".into());

    let voxels = Array3::from_shape_vec(
        img.shape,
        img.values.iter().map(|&v| v.round() as i16).collect(),
    )
    .map_err(|e| OarsegError::ShapeMismatch(e.to_string()))?;
    let mut codes = Vec::with_capacity(lbl.values.len());
    for v in &lbl.values {
        let c = v.round() as i64;
        if !(0..=6).contains(&c) {
            return Err(OarsegError::InvalidOrganCode(c));
        }
        codes.push(c as u8);
    }
    let labels = Array3::from_shape_vec(lbl.shape, codes)
        .map_err(|e| OarsegError::ShapeMismatch(e.to_string()))?;

    let ct = CtVolume::new(patient_id.clone(), voxels, img.spacing)?;
    let lab = LabelVolume::new(patient_id, labels)?;
    check_pair(&ct, &lab)?;
    Ok((ct, lab))
}

/// Writes a single-file little-endian NIfTI-1 int16 volume.
pub fn write_nifti_i16(path: &Path, data: &Array3<i16>, spacing: [f64; 3], gz: bool) -> Result<()> {
    let (nz, ny, nx) = (data.shape()[0], data.shape()[1], data.shape()[2]);
    let mut header = vec![0u8; NIFTI1_HEADER_LEN + 4];
    header[0..4].copy_from_slice(&348i32.to_le_bytes());
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());
    put_i16(&mut header, 40, 3); // dim[0]
    put_i16(&mut header, 42, nx as i16);
    put_i16(&mut header, 44, ny as i16);
    put_i16(&mut header, 46, nz as i16);
    for k in 4..8 {
        put_i16(&mut header, 40 + 2 * k, 1);
    }
    put_i16(&mut header, 70, DT_INT16);
    put_i16(&mut header, 72, 16); // bitpix
    put_f32(&mut header, 76, 1.0); // pixdim[0]
    put_f32(&mut header, 80, spacing[2] as f32); // dx
    put_f32(&mut header, 84, spacing[1] as f32); // dy
    put_f32(&mut header, 88, spacing[0] as f32); // dz
    put_f32(&mut header, 108, 352.0); // vox_offset
    put_f32(&mut header, 112, 1.0); // scl_slope
    header[344..348].copy_from_slice(b"n+1\0");

    let mut body = header;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                body.extend_from_slice(&data[[z, y, x]].to_le_bytes());
            }
        }
    }
    if gz {
        let file = fs::File::create(path).map_err(|e| OarsegError::io(path, e))?;
        let mut enc = flate2::write::GzEncoder::new(file, flate2::Compression::default());
        enc.write_all(&body).map_err(|e| OarsegError::io(path, e))?;
        enc.finish().map_err(|e| OarsegError::io(path, e))?;
    } else {
        fs::write(path, body).map_err(|e| OarsegError::io(path, e))?;
    }
    Ok(())
}
