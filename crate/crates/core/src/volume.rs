use ndarray::Array3;

use crate::error::{OarsegError, Result};

pub const HU_MIN: i16 = -2048;
pub const HU_MAX: i16 = 4095;

/// A patient's 3-D CT scan in Hounsfield units, slice-major (z, y, x).
#[derive(Debug, Clone)]
pub struct CtVolume {
    pub patient_id: String,
    pub voxels: Array3<i16>,
    /// (dz, dy, dx) in millimeters.
    pub spacing: [f64; 3],
}

impl CtVolume {
    pub fn new(patient_id: impl Into<String>, voxels: Array3<i16>, spacing: [f64; 3]) -> Result<Self> {
        let v = CtVolume {
            patient_id: patient_id.into(),
            voxels,
            spacing,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.voxels.shape();
        (s[0], s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        let (n, _, _) = self.shape();
        if n < 1 {
            return Err(OarsegError::InvalidVolume("volume has no slices".into()));
        }
        if self.spacing.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(OarsegError::InvalidVolume(format!(
                "non-positive spacing {:?}",
                self.spacing
            )));
        }
        if let Some(&v) = self.voxels.iter().find(|&&v| !(HU_MIN..=HU_MAX).contains(&v)) {
            return Err(OarsegError::InvalidVolume(format!(
                "HU value {v} outside [{HU_MIN}, {HU_MAX}]"
            )));
        }
        Ok(())
    }
}

/// Per-voxel organ annotation; codes 0 (background) through 6.
#[derive(Debug, Clone)]
pub struct LabelVolume {
    pub patient_id: String,
    pub labels: Array3<u8>,
}

impl LabelVolume {
    pub fn new(patient_id: impl Into<String>, labels: Array3<u8>) -> Result<Self> {
        let v = LabelVolume {
            patient_id: patient_id.into(),
            labels,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let s = self.labels.shape();
        (s[0], s[1], s[2])
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(&c) = self.labels.iter().find(|&&c| c > 6) {
            return Err(OarsegError::InvalidOrganCode(c as i64));
        }
        Ok(())
    }
}

/// Checks that a scan and its annotation agree on shape.
pub fn check_pair(ct: &CtVolume, labels: &LabelVolume) -> Result<()> {
    if ct.shape() != labels.shape() {
        return Err(OarsegError::ShapeMismatch(format!(
            "image {:?} vs labels {:?} for patient {}",
            ct.shape(),
            labels.shape(),
            ct.patient_id
        )));
    }
    Ok(())
}
