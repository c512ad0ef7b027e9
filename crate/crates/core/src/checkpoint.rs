//! Checkpoint container: a single file holding a JSON manifest (field name,
//! offsets, extents, element type) followed by raw little-endian arrays.
//! Bit-exact: save, load, save again produces byte-identical files.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{Elem, ParamContainer, Tensor};

const MAGIC: &[u8; 4] = b"GVCK";
const FORMAT_VERSION: u32 = 1;

/// Serializable RNG position: seed, block position, stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let word_pos = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    stage: String,
    step: u64,
    config: String,
    rng: RngState,
    arrays: Vec<ArrayEntry>,
}

/// In-memory checkpoint: config, step, RNG state, and named arrays in a
/// stable order.
pub struct Checkpoint<T> {
    pub config: RunConfig,
    pub stage: String,
    pub step: u64,
    pub rng: RngState,
    pub arrays: Vec<(String, Tensor<T>)>,
}

impl<T: Elem> Checkpoint<T> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut entries = Vec::with_capacity(self.arrays.len());
        let mut offset = 0u64;
        for (name, tensor) in &self.arrays {
            let len = (tensor.numel() * T::byte_width()) as u64;
            entries.push(ArrayEntry {
                name: name.clone(),
                dtype: T::DTYPE.to_string(),
                shape: tensor.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            stage: self.stage.clone(),
            step: self.step,
            config: self.config.serialize(),
            rng: self.rng.clone(),
            arrays: entries,
        };
        let manifest_bytes = serde_json::to_vec(&manifest)?;

        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        file.write_all(MAGIC)?;
        file.write_all(&FORMAT_VERSION.to_le_bytes())?;
        file.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
        file.write_all(&manifest_bytes)?;
        for (_, tensor) in &self.arrays {
            for &v in tensor.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        file.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        file.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: not a checkpoint file",
                path.display()
            )));
        }
        let mut buf4 = [0u8; 4];
        file.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut buf8 = [0u8; 8];
        file.read_exact(&mut buf8)?;
        let manifest_len = u64::from_le_bytes(buf8) as usize;
        let mut manifest_bytes = vec![0u8; manifest_len];
        file.read_exact(&mut manifest_bytes)?;
        let manifest: Manifest = serde_json::from_slice(&manifest_bytes)?;
        let config = RunConfig::parse(&manifest.config)
            .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;

        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        let width = T::byte_width();
        for entry in &manifest.arrays {
            if entry.dtype != T::DTYPE {
                return Err(Error::Checkpoint(format!(
                    "array '{}' has dtype {}, expected {}",
                    entry.name,
                    entry.dtype,
                    T::DTYPE
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if numel * width != entry.len as usize {
                return Err(Error::Checkpoint(format!(
                    "array '{}' length disagrees with shape",
                    entry.name
                )));
            }
            let mut bytes = vec![0u8; entry.len as usize];
            file.read_exact(&mut bytes)?;
            let data: Vec<T> = bytes.chunks_exact(width).map(T::from_le_bytes).collect();
            arrays.push((entry.name.clone(), Tensor::from_vec(data, &entry.shape)?));
        }
        Ok(Self {
            config,
            stage: manifest.stage,
            step: manifest.step,
            rng: manifest.rng,
            arrays,
        })
    }

    pub fn array(&self, name: &str) -> Result<&Tensor<T>> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Checkpoint(format!("missing array '{name}'")))
    }

    /// Overwrite a model's parameters from same-named arrays. Every
    /// parameter must be present with a matching shape.
    pub fn load_into<M: ParamContainer<T> + ?Sized>(&self, model: &mut M) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<T>> = self
            .arrays
            .iter()
            .map(|(n, t)| (n.as_str(), t))
            .collect();
        let mut missing = Vec::new();
        let mut mismatched = Vec::new();
        model.visit_mut(&mut |p| match by_name.get(p.name()) {
            Some(t) if t.shape() == p.value.shape() => p.value = (*t).clone(),
            Some(t) => mismatched.push(format!(
                "{}: {:?} vs {:?}",
                p.name(),
                p.value.shape(),
                t.shape()
            )),
            None => missing.push(p.name().to_string()),
        });
        if !missing.is_empty() || !mismatched.is_empty() {
            return Err(Error::Checkpoint(format!(
                "incompatible checkpoint: missing {missing:?}, mismatched {mismatched:?}"
            )));
        }
        Ok(())
    }
}

/// Collect a model's parameters as named arrays, in visit order.
pub fn model_arrays<T: Elem, M: ParamContainer<T> + ?Sized>(model: &M) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    model.visit(&mut |p| out.push((p.name().to_string(), p.value.clone())));
    out
}

/// Fail with a field-level diff when two configs disagree on geometry.
pub fn require_compatible_geometry(run: &RunConfig, loaded: &RunConfig) -> Result<()> {
    let diff = run.geometry_diff(loaded);
    if diff.is_empty() {
        return Ok(());
    }
    let lines: Vec<String> = diff
        .iter()
        .map(|(k, a, b)| format!("{k}: run={a} checkpoint={b}"))
        .collect();
    Err(Error::Checkpoint(format!(
        "checkpoint geometry incompatible with run config:\n  {}",
        lines.join("\n  ")
    )))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::seeded_rng;
    use rand::Rng;

    #[test]
    fn rng_state_round_trips_mid_stream() {
        let mut rng = seeded_rng(7);
        for _ in 0..13 {
            let _: f64 = rng.random();
        }
        let state = RngState::capture(&rng);
        let mut restored = state.restore();
        for _ in 0..5 {
            assert_eq!(rng.random::<u64>(), restored.random::<u64>());
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = seeded_rng(3);
        let ckpt = Checkpoint::<f32> {
            config: RunConfig::default(),
            stage: "stage1".into(),
            step: 123,
            rng: RngState::capture(&rng),
            arrays: vec![
                ("a.weight".into(), Tensor::randn(&[3, 4], 1.0, &mut rng)),
                ("a.bias".into(), Tensor::randn(&[4], 1.0, &mut rng)),
            ],
        };
        let p1 = dir.path().join("one.ckpt");
        let p2 = dir.path().join("two.ckpt");
        ckpt.save(&p1).unwrap();
        let loaded = Checkpoint::<f32>::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.config, ckpt.config);
        assert_eq!(loaded.array("a.weight").unwrap(), &ckpt.arrays[0].1);
    }

    #[test]
    fn load_rejects_wrong_dtype() {
        let dir = tempfile::tempdir().unwrap();
        let rng = seeded_rng(3);
        let ckpt = Checkpoint::<f32> {
            config: RunConfig::default(),
            stage: "stage1".into(),
            step: 0,
            rng: RngState::capture(&rng),
            arrays: vec![("x".into(), Tensor::zeros(&[2]))],
        };
        let p = dir.path().join("c.ckpt");
        ckpt.save(&p).unwrap();
        assert!(Checkpoint::<f64>::load(&p).is_err());
    }

    #[test]
    fn geometry_compatibility_reports_fields() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.code_len = 64;
        let err = require_compatible_geometry(&a, &b).unwrap_err().to_string();
        assert!(err.contains("model.code_len"), "{err}");
        assert!(err.contains("64"), "{err}");
        // Non-geometry differences are fine.
        let mut c = a.clone();
        c.stage2_steps = 5;
        c.seed = 99;
        require_compatible_geometry(&a, &c).unwrap();
    }
}
