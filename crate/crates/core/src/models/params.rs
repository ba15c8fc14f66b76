//! Named parameter containers, deterministic initialization, and the
//! on-disk checkpoint format (`manifest.json` + one little-endian raw
//! array file per parameter).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{OarsegError, Result};

/// Ordered name -> array map holding a model's weights and biases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    map: BTreeMap<String, ArrayD<f64>>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name:?}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<f64>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ArrayD<f64>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn n_scalars(&self) -> usize {
        self.map.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.map.values().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Clamps every weight into [-c, c]; the optional Lipschitz escape
    /// hatch for critics.
    pub fn clip(&mut self, c: f64) {
        for a in self.map.values_mut() {
            a.mapv_inplace(|v| v.clamp(-c, c));
        }
    }
}

/// Ordered (name, shape) list describing a model's parameters; the draw
/// order during initialization.
pub type ParamSpecs = Vec<(String, Vec<usize>)>;

/// He-style normal initialization for leaky-ReLU layers: weights get
/// std sqrt(2 / ((1 + slope^2) * fan_in)), biases start at zero.
///
/// `fan_in` is everything but the leading (output) dimension, which
/// holds for both OIHW convolution weights and (O, F) dense weights.
pub fn init_parameters(specs: &ParamSpecs, leaky_slope: f64, seed: u64) -> Parameters {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    for (name, shape) in specs {
        if name.ends_with(".b") {
            params.insert(name.clone(), ArrayD::zeros(ndarray::IxDyn(shape)));
            continue;
        }
        let fan_in: usize = shape.iter().skip(1).product::<usize>().max(1);
        let std = (2.0 / ((1.0 + leaky_slope * leaky_slope) * fan_in as f64)).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let mut value = ArrayD::zeros(ndarray::IxDyn(shape));
        for v in value.iter_mut() {
            *v = normal.sample(&mut rng);
        }
        params.insert(name.clone(), value);
    }
    params
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub architecture: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: f64,
    pub val_dsc: f64,
    /// Parameter name -> array shape, in map order.
    pub params: BTreeMap<String, Vec<usize>>,
}

/// Writes `manifest.json` plus `<name>.raw` (little-endian f64) per parameter.
pub fn save_checkpoint(dir: &Path, manifest: &CheckpointManifest, params: &Parameters) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| OarsegError::io(dir, e))?;
    let mut manifest = manifest.clone();
    manifest.params = params
        .iter()
        .map(|(n, a)| (n.clone(), a.shape().to_vec()))
        .collect();
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| OarsegError::Json {
        path: path.clone(),
        source: e,
    })?;
    fs::write(&path, json).map_err(|e| OarsegError::io(&path, e))?;
    for (name, value) in params.iter() {
        let mut bytes = Vec::with_capacity(value.len() * 8);
        for &v in value.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let fpath = dir.join(format!("{name}.raw"));
        fs::write(&fpath, bytes).map_err(|e| OarsegError::io(&fpath, e))?;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(CheckpointManifest, Parameters)> {
    let path = dir.join("manifest.json");
    let file = fs::File::open(&path).map_err(|_| OarsegError::Checkpoint {
        path: dir.to_path_buf(),
        msg: "missing manifest.json".into(),
    })?;
    let manifest: CheckpointManifest = serde_json::from_reader(file).map_err(|e| OarsegError::Json {
        path: path.clone(),
        source: e,
    })?;
    let mut params = Parameters::new();
    for (name, shape) in &manifest.params {
        let fpath = dir.join(format!("{name}.raw"));
        let bytes = fs::read(&fpath).map_err(|e| OarsegError::io(&fpath, e))?;
        let n: usize = shape.iter().product();
        if bytes.len() != n * 8 {
            return Err(OarsegError::Checkpoint {
                path: fpath,
                msg: format!("expected {} bytes, found {}", n * 8, bytes.len()),
            });
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(shape), values)
            .map_err(|e| OarsegError::Checkpoint {
                path: dir.to_path_buf(),
                msg: e.to_string(),
            })?;
        params.insert(name.clone(), arr);
    }
    Ok((manifest, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_zeroes_biases() {
        let specs: ParamSpecs = vec![
            ("a.w".into(), vec![4, 2, 3, 3]),
            ("a.b".into(), vec![4]),
        ];
        let p1 = init_parameters(&specs, 0.2, 9);
        let p2 = init_parameters(&specs, 0.2, 10);
        let p3 = init_parameters(&specs, 0.2, 9);
        assert_eq!(p1, p3);
        assert_ne!(p1, p2);
        assert!(p1.get("a.b").iter().all(|&v| v == 0.0));
        assert!(p1.get("a.w").iter().any(|&v| v != 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let specs: ParamSpecs = vec![
            ("layer.w".into(), vec![3, 5]),
            ("layer.b".into(), vec![3]),
        ];
        let params = init_parameters(&specs, 0.2, 17);
        let manifest = CheckpointManifest {
            architecture: "unet".into(),
            config: serde_json::json!({"depth": 3}),
            seed: 17,
            epoch: 4,
            val_loss: 0.25,
            val_dsc: 0.9,
            params: BTreeMap::new(),
        };
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &manifest, &params).unwrap();
        let (m2, p2) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(m2.architecture, "unet");
        assert_eq!(m2.epoch, 4);
        assert_eq!(params, p2);
        // bitwise equality of each value
        for (name, a) in params.iter() {
            let b = p2.get(name);
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
