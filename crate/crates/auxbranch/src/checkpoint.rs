//! Checkpoint files: named tensors with a text manifest and a raw
//! little-endian payload.
//!
//! Layout: `u64` manifest length in bytes, UTF-8 manifest, then tensor data
//! in manifest order. The manifest records the model configuration, the RNG
//! master seed and one `tensor <name> <rows> <cols> <dtype>` line per tensor.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub dtype: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub seed: u64,
    /// Model/config key-value pairs, sorted by key.
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<TensorSpec>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<(String, Tensor2D)>,
}

impl Checkpoint {
    /// Collects (a subset of) a parameter set into a checkpoint.
    pub fn from_params(
        params: &ParamSet,
        names: Option<&[String]>,
        seed: u64,
        config: BTreeMap<String, String>,
        dtype: &str,
    ) -> Result<Self> {
        let mut tensors = Vec::new();
        match names {
            Some(ns) => {
                for n in ns {
                    let p = params.get(n).ok_or_else(|| Error::MissingTensor {
                        name: n.clone(),
                        source_name: "param set".into(),
                    })?;
                    tensors.push((n.clone(), p.value.clone()));
                }
            }
            None => {
                for p in params.iter() {
                    tensors.push((p.name.clone(), p.value.clone()));
                }
            }
        }
        let specs = tensors
            .iter()
            .map(|(n, t)| TensorSpec {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
                dtype: dtype.to_string(),
            })
            .collect();
        Ok(Checkpoint {
            manifest: Manifest {
                seed,
                config,
                tensors: specs,
            },
            tensors,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2D> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent)?;
            }
        }
        let mut manifest = String::from("tensorfile v1\n");
        manifest.push_str(&format!("seed = {}\n", self.manifest.seed));
        for (k, v) in &self.manifest.config {
            manifest.push_str(&format!("config.{k} = {v}\n"));
        }
        for s in &self.manifest.tensors {
            manifest.push_str(&format!("tensor {} {} {} {}\n", s.name, s.rows, s.cols, s.dtype));
        }
        manifest.push_str("end\n");

        let mut f = std::fs::File::create(path)?;
        f.write_all(&(manifest.len() as u64).to_le_bytes())?;
        f.write_all(manifest.as_bytes())?;
        let mut payload = Vec::new();
        for ((_, t), spec) in self.tensors.iter().zip(&self.manifest.tensors) {
            match spec.dtype.as_str() {
                "f64" => {
                    for &v in t.data() {
                        payload.extend_from_slice(&v.to_le_bytes());
                    }
                }
                "f32" => {
                    for &v in t.data() {
                        payload.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
                other => {
                    return Err(Error::CheckpointFormat(format!("unknown dtype '{other}'")));
                }
            }
        }
        f.write_all(&payload)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() < 8 {
            return Err(Error::CheckpointFormat("file too short".into()));
        }
        let mlen = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 8 + mlen {
            return Err(Error::CheckpointFormat("manifest truncated".into()));
        }
        let manifest_text = std::str::from_utf8(&bytes[8..8 + mlen])
            .map_err(|e| Error::CheckpointFormat(format!("manifest not UTF-8: {e}")))?;
        let mut lines = manifest_text.lines();
        if lines.next() != Some("tensorfile v1") {
            return Err(Error::CheckpointFormat("missing 'tensorfile v1' header".into()));
        }
        let mut seed = None;
        let mut config = BTreeMap::new();
        let mut specs = Vec::new();
        for line in lines {
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 4 {
                    return Err(Error::CheckpointFormat(format!("bad tensor line '{line}'")));
                }
                specs.push(TensorSpec {
                    name: parts[0].to_string(),
                    rows: parts[1]
                        .parse()
                        .map_err(|e| Error::CheckpointFormat(format!("bad rows: {e}")))?,
                    cols: parts[2]
                        .parse()
                        .map_err(|e| Error::CheckpointFormat(format!("bad cols: {e}")))?,
                    dtype: parts[3].to_string(),
                });
            } else if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                if k == "seed" {
                    seed = Some(
                        v.parse::<u64>()
                            .map_err(|e| Error::CheckpointFormat(format!("bad seed: {e}")))?,
                    );
                } else if let Some(key) = k.strip_prefix("config.") {
                    config.insert(key.to_string(), v.to_string());
                }
            }
        }
        let seed = seed.ok_or_else(|| Error::CheckpointFormat("manifest missing seed".into()))?;

        let mut off = 8 + mlen;
        let mut tensors = Vec::with_capacity(specs.len());
        for s in &specs {
            let n = s.rows * s.cols;
            let width = match s.dtype.as_str() {
                "f64" => 8,
                "f32" => 4,
                other => return Err(Error::CheckpointFormat(format!("unknown dtype '{other}'"))),
            };
            let end = off + n * width;
            if end > bytes.len() {
                return Err(Error::CheckpointFormat(format!("payload truncated at '{}'", s.name)));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let at = off + i * width;
                if width == 8 {
                    data.push(f64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")));
                } else {
                    data.push(
                        f32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes")) as f64,
                    );
                }
            }
            off = end;
            tensors.push((s.name.clone(), Tensor2D::from_vec(s.rows, s.cols, data)?));
        }
        Ok(Checkpoint {
            manifest: Manifest {
                seed,
                config,
                tensors: specs,
            },
            tensors,
        })
    }
}

/// Elementwise arithmetic mean of checkpoints with identical manifests.
pub fn average_checkpoints(ckpts: &[Checkpoint]) -> Result<Checkpoint> {
    let first = ckpts
        .first()
        .ok_or_else(|| Error::EmptyInput("average_checkpoints with no inputs".into()))?;
    for (i, c) in ckpts.iter().enumerate().skip(1) {
        if c.manifest != first.manifest {
            return Err(Error::ManifestMismatch(format!(
                "checkpoint {i} differs from checkpoint 0"
            )));
        }
    }
    let inv = 1.0 / ckpts.len() as f64;
    let mut out = first.clone();
    for (ti, (_, tensor)) in out.tensors.iter_mut().enumerate() {
        let mut acc = Tensor2D::zeros(tensor.rows(), tensor.cols());
        for c in ckpts {
            acc.add_assign(&c.tensors[ti].1);
        }
        acc.scale_assign(inv);
        *tensor = acc;
    }
    Ok(out)
}

/// Loads checkpoint tensors into a parameter set, requiring exact shape
/// matches. Returns the transferred tensor names.
pub fn load_into_params(ckpt: &Checkpoint, params: &mut ParamSet, source_name: &str) -> Result<Vec<String>> {
    let mut transferred = Vec::new();
    for (name, tensor) in &ckpt.tensors {
        let p = params.get_mut(name).ok_or_else(|| Error::MissingTensor {
            name: name.clone(),
            source_name: format!("model (loading {source_name})"),
        })?;
        if p.value.shape() != tensor.shape() {
            return Err(Error::TensorShape {
                name: name.clone(),
                expected: p.value.shape_str(),
                got: tensor.shape_str(),
            });
        }
        p.value = tensor.clone();
        transferred.push(name.clone());
    }
    Ok(transferred)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ckpt_with(value: f64, seed: u64) -> Checkpoint {
        let mut ps = ParamSet::new(seed);
        ps.insert("a", Tensor2D::filled(2, 3, value)).unwrap();
        ps.insert("b", Tensor2D::filled(1, 4, value * 2.0)).unwrap();
        let mut cfg = BTreeMap::new();
        cfg.insert("d_model".into(), "64".into());
        Checkpoint::from_params(&ps, None, seed, cfg, "f64").unwrap()
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ck = ckpt_with(0.123456789, 9);
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.manifest, ck.manifest);
        assert_eq!(back.get("a").unwrap().data(), ck.get("a").unwrap().data());
        assert_eq!(back.manifest.config.get("d_model").map(String::as_str), Some("64"));
    }

    #[test]
    fn average_of_identical_is_identity() {
        let ck = ckpt_with(0.5, 1);
        let avg = average_checkpoints(&[ck.clone(), ck.clone(), ck.clone()]).unwrap();
        assert_eq!(avg.get("a").unwrap().data(), ck.get("a").unwrap().data());
    }

    #[test]
    fn average_of_two_is_elementwise_mean() {
        let a = ckpt_with(1.0, 1);
        let b = ckpt_with(3.0, 1);
        let avg = average_checkpoints(&[a, b]).unwrap();
        assert!(avg.get("a").unwrap().data().iter().all(|&v| v == 2.0));
        assert!(avg.get("b").unwrap().data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn average_is_idempotent_on_means() {
        let a = ckpt_with(1.0, 1);
        let b = ckpt_with(2.0, 1);
        let ab = average_checkpoints(&[a.clone(), b.clone()]).unwrap();
        let again = average_checkpoints(&[ab.clone(), ab.clone()]).unwrap();
        assert_eq!(again.get("a").unwrap().data(), ab.get("a").unwrap().data());
    }

    #[test]
    fn mismatched_manifests_rejected() {
        let a = ckpt_with(1.0, 1);
        let b = ckpt_with(1.0, 2); // different seed
        assert!(matches!(
            average_checkpoints(&[a, b]),
            Err(Error::ManifestMismatch(_))
        ));
    }

    #[test]
    fn load_into_params_checks_shapes_and_names() {
        let ck = ckpt_with(1.0, 1);
        let mut ps = ParamSet::new(0);
        ps.insert("a", Tensor2D::zeros(2, 3)).unwrap();
        // missing "b"
        assert!(matches!(
            load_into_params(&ck, &mut ps, "test"),
            Err(Error::MissingTensor { .. })
        ));
        let mut ps2 = ParamSet::new(0);
        ps2.insert("a", Tensor2D::zeros(9, 9)).unwrap();
        ps2.insert("b", Tensor2D::zeros(1, 4)).unwrap();
        assert!(matches!(
            load_into_params(&ck, &mut ps2, "test"),
            Err(Error::TensorShape { .. })
        ));
    }

    #[test]
    fn f32_dtype_round_trips_through_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut ps = ParamSet::new(0);
        ps.insert("a", Tensor2D::filled(1, 2, 0.1)).unwrap();
        let ck = Checkpoint::from_params(&ps, None, 0, BTreeMap::new(), "f32").unwrap();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.get("a").unwrap().data()[0], 0.1f32 as f64);
    }
}
