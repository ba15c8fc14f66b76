//! Deterministic synthetic thoracic phantoms: two lateral lung ellipsoids,
//! a medial heart ellipsoid, and three thin tubes (trachea, spinal cord,
//! esophagus), each with >= 200 HU contrast against soft-tissue background.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{OarsegError, Result};
use crate::io::write_raw_patient;
use crate::organs::OrganId;
use crate::volume::{CtVolume, LabelVolume};

pub const MIN_DIM: usize = 16;

/// Analytic description of one generated structure, kept for tests that
/// re-rasterize geometry independently.
#[derive(Debug, Clone)]
pub enum Structure {
    /// Axis-aligned ellipsoid: center (cz, cy, cx), radii (rz, ry, rx), in voxels.
    Ellipsoid { center: [f64; 3], radii: [f64; 3], hu: i16 },
    /// Tube along the slice axis: per-slice circle of radius `r` centred at
    /// (cy + drift*sin(pi*z/n), cx), spanning slices [z0, z1).
    Tube {
        cy: f64,
        cx: f64,
        r: f64,
        z0: usize,
        z1: usize,
        drift: f64,
        hu: i16,
    },
}

#[derive(Debug, Clone)]
pub struct PhantomGeometry {
    pub patient_id: String,
    /// One structure per organ, in code order 1..=6.
    pub structures: Vec<(OrganId, Structure)>,
    pub background_hu: i16,
}

impl Structure {
    /// True when voxel (z, y, x) lies inside the structure.
    pub fn contains(&self, z: usize, y: usize, x: usize, n_slices: usize) -> bool {
        match *self {
            Structure::Ellipsoid { center, radii, .. } => {
                let dz = (z as f64 - center[0]) / radii[0];
                let dy = (y as f64 - center[1]) / radii[1];
                let dx = (x as f64 - center[2]) / radii[2];
                dz * dz + dy * dy + dx * dx <= 1.0
            }
            Structure::Tube { cy, cx, r, z0, z1, drift, .. } => {
                if z < z0 || z >= z1 {
                    return false;
                }
                let phase = std::f64::consts::PI * z as f64 / n_slices as f64;
                let cyz = cy + drift * phase.sin();
                let dy = y as f64 - cyz;
                let dx = x as f64 - cx;
                dy * dy + dx * dx <= r * r
            }
        }
    }

    pub fn hu(&self) -> i16 {
        match *self {
            Structure::Ellipsoid { hu, .. } | Structure::Tube { hu, .. } => hu,
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, v: f64, rel: f64) -> f64 {
    v * (1.0 + rng.random_range(-rel..=rel))
}

/// Generates one phantom patient in memory.
pub fn generate_phantom_patient(
    rng: &mut ChaCha8Rng,
    shape: (usize, usize, usize),
    patient_id: &str,
) -> Result<(CtVolume, LabelVolume, PhantomGeometry)> {
    let (s, h, w) = shape;
    if s < MIN_DIM || h < MIN_DIM || w < MIN_DIM {
        return Err(OarsegError::PhantomShapeTooSmall { shape, min: MIN_DIM });
    }
    let (sf, hf, wf) = (s as f64, h as f64, w as f64);
    let background_hu = 30 + rng.random_range(-15i16..=15);

    // Lateral lungs, medial heart; tube radii floored so every structure
    // rasterizes to at least one voxel per slice it crosses. HU values are
    // spaced so every organ is separable from every other and from the
    // background by well over the noise level.
    let lung = |rng: &mut ChaCha8Rng, cx_frac: f64, hu_base: i16| Structure::Ellipsoid {
        center: [
            jitter(rng, 0.50 * sf, 0.04),
            jitter(rng, 0.52 * hf, 0.03),
            jitter(rng, cx_frac * wf, 0.03),
        ],
        radii: [
            jitter(rng, 0.40 * sf, 0.08),
            jitter(rng, 0.30 * hf, 0.08),
            jitter(rng, 0.14 * wf, 0.08),
        ],
        hu: hu_base + rng.random_range(-25i16..=25),
    };
    let right_lung = lung(rng, 0.26, -780);
    let left_lung = lung(rng, 0.74, -650);
    let heart = Structure::Ellipsoid {
        center: [
            jitter(rng, 0.55 * sf, 0.04),
            jitter(rng, 0.58 * hf, 0.02),
            jitter(rng, 0.52 * wf, 0.02),
        ],
        radii: [
            jitter(rng, 0.24 * sf, 0.08),
            jitter(rng, 0.14 * hf, 0.08),
            jitter(rng, 0.11 * wf, 0.08),
        ],
        hu: 290 + rng.random_range(-25i16..=25),
    };
    let tube = |rng: &mut ChaCha8Rng, cy_frac: f64, cx_frac: f64, r_frac: f64, z0f: f64, z1f: f64, hu_base: i16| {
        Structure::Tube {
            cy: jitter(rng, cy_frac * hf, 0.02),
            cx: jitter(rng, cx_frac * wf, 0.02),
            r: (jitter(rng, r_frac * hf.min(wf), 0.10)).max(0.95),
            z0: (z0f * sf) as usize,
            z1: ((z1f * sf) as usize).min(s),
            drift: 0.01 * hf * rng.random_range(0.0..1.0),
            hu: hu_base + rng.random_range(-25i16..=25),
        }
    };
    let trachea = tube(rng, 0.30, 0.50, 0.045, 0.0, 0.55, -930);
    let spinal_cord = tube(rng, 0.84, 0.50, 0.040, 0.0, 1.0, 430);
    // Bright band, as with oral contrast: keeps the thin tube separable
    // from the soft-tissue averages along lung boundaries.
    let esophagus = tube(rng, 0.40, 0.43, 0.035, 0.10, 0.95, 600);

    let structures = vec![
        (OrganId::RightLung, right_lung),
        (OrganId::LeftLung, left_lung),
        (OrganId::Heart, heart),
        (OrganId::Trachea, trachea),
        (OrganId::SpinalCord, spinal_cord),
        (OrganId::Esophagus, esophagus),
    ];
    // Paint order decides ownership where shapes touch. The heart goes
    // first so its voxel set is exactly its analytic ellipsoid (lungs wrap
    // around it); everything else follows in code order.
    let paint_order = [2usize, 0, 1, 3, 4, 5];

    let noise = Normal::new(0.0f64, 8.0).expect("valid normal");
    let mut voxels = Array3::<i16>::zeros((s, h, w));
    let mut labels = Array3::<u8>::zeros((s, h, w));
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let mut hu = background_hu as f64;
                for &i in &paint_order {
                    let (organ, st) = &structures[i];
                    if st.contains(z, y, x, s) {
                        hu = st.hu() as f64;
                        labels[[z, y, x]] = organ.code();
                        break; // earlier paints take precedence
                    }
                }
                let v = (hu + noise.sample(rng)).round();
                voxels[[z, y, x]] = v.clamp(-1024.0, 2000.0) as i16;
            }
        }
    }

    let ct = CtVolume::new(patient_id, voxels, [3.0, 1.0, 1.0])?;
    let lv = LabelVolume::new(patient_id, labels)?;
    let geometry = PhantomGeometry {
        patient_id: patient_id.to_string(),
        structures,
        background_hu,
    };
    Ok((ct, lv, geometry))
}

/// Generates `n_patients` phantoms in memory, deterministically in `seed`.
pub fn generate_phantom_dataset(
    seed: u64,
    n_patients: usize,
    shape: (usize, usize, usize),
) -> Result<Vec<(CtVolume, LabelVolume, PhantomGeometry)>> {
    if n_patients < 3 {
        return Err(OarsegError::TooFewPatients { need: 3, got: n_patients });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_patients)
        .map(|i| {
            let pid = format!("p{i:03}");
            generate_phantom_patient(&mut rng, shape, &pid)
        })
        .collect()
}

/// Writes a phantom dataset in the raw fallback format, one directory per
/// patient under `out_dir`.
pub fn synthesize_phantom(
    out_dir: impl AsRef<Path>,
    seed: u64,
    n_patients: usize,
    shape: (usize, usize, usize),
) -> Result<Vec<PhantomGeometry>> {
    let out_dir = out_dir.as_ref();
    let generated = generate_phantom_dataset(seed, n_patients, shape)?;
    let mut geos = Vec::with_capacity(generated.len());
    for (ct, lv, geo) in generated {
        write_raw_patient(&out_dir.join(&ct.patient_id), &ct, &lv)?;
        geos.push(geo);
    }
    Ok(geos)
}
