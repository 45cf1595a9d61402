//! Single-file checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CEC1"
//! u32  meta_len      | meta.json bytes (kind, step, config snapshot, schedule, extras)
//! u32  n_params
//! per parameter:
//!   u32 name_len     | name (utf-8)
//!   u32 ndim         | u32 dims[ndim]
//!   f32 data[product(dims)]
//! ```
//!
//! Parameter names follow `<module>.<layer>.<tensor>` (for example
//! `enc.conv1.w`, `mid.attn.q.b`) in registration order. Save/load
//! round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::nn::{Arr, ParamId, ParamStore};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::IxDyn;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"CEC1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Which network this is: "ae", "stage1", "warp", "stage2".
    pub kind: String,
    pub step: u64,
    /// Snapshot of the run configuration the network was trained with.
    pub config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ScheduleMeta>,
    /// Free-form per-kind extras (e.g. the latent scale of the autoencoder).
    #[serde(default)]
    pub extras: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Arr)>,
}

impl Checkpoint {
    pub fn from_store(meta: CheckpointMeta, store: &ParamStore) -> Self {
        let params = store
            .named()
            .map(|(name, value)| (name.to_string(), value.clone()))
            .collect();
        Checkpoint { meta, params }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut w = BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        let meta = serde_json::to_vec(&self.meta)?;
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(&meta)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for (name, value) in &self.params {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(value.ndim() as u32)?;
            for &d in value.shape() {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            let slice = value.as_slice().expect("standard layout");
            for &v in slice {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let meta_len = r.read_u32::<LittleEndian>()? as usize;
        let mut meta_buf = vec![0u8; meta_len];
        r.read_exact(&mut meta_buf)?;
        let meta: CheckpointMeta = serde_json::from_slice(&meta_buf)?;
        let n_params = r.read_u32::<LittleEndian>()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name_len = r.read_u32::<LittleEndian>()? as usize;
            let mut name_buf = vec![0u8; name_len];
            r.read_exact(&mut name_buf)?;
            let name = String::from_utf8(name_buf)
                .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let len: usize = dims.iter().product();
            let mut data = vec![0f32; len];
            for v in data.iter_mut() {
                *v = r.read_f32::<LittleEndian>()?;
            }
            let arr = Arr::from_shape_vec(IxDyn(&dims), data)
                .map_err(|e| Error::Checkpoint(format!("bad shape for '{name}': {e}")))?;
            params.push((name, arr));
        }
        Ok(Checkpoint { meta, params })
    }

    /// Copy parameter values into a freshly built store of the same layout.
    pub fn load_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, model expects {}",
                self.params.len(),
                store.len()
            )));
        }
        store.load_named(&self.params)
    }

    pub fn extra_f32_vec(&self, key: &str) -> Option<Vec<f32>> {
        self.meta.extras.get(key).and_then(|v| {
            v.as_array().map(|a| {
                a.iter()
                    .filter_map(|x| x.as_f64().map(|f| f as f32))
                    .collect()
            })
        })
    }
}

/// FNV-style digest over all parameter bits; used by reproducibility checks.
pub fn store_digest(store: &ParamStore) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for i in 0..store.len() {
        let v = store.value(ParamId(i));
        for &x in v.as_slice().expect("standard layout") {
            h ^= x.to_bits() as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::ArrayD;

    fn sample_store() -> ParamStore {
        let mut ps = ParamStore::new();
        let mut r = rng::seeded(42);
        let mut a = ArrayD::<f32>::zeros(IxDyn(&[4, 3, 3, 3]));
        for v in a.iter_mut() {
            *v = rng::normal(&mut r);
        }
        ps.register("enc.conv1.w", a);
        ps.register("enc.conv1.b", ArrayD::zeros(IxDyn(&[4])));
        ps
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ps = sample_store();
        let meta = CheckpointMeta {
            kind: "ae".into(),
            step: 17,
            config: serde_json::json!({"resolution": 64}),
            schedule: Some(ScheduleMeta {
                t_steps: 200,
                beta_start: 1e-4,
                beta_end: 0.02,
            }),
            extras: serde_json::json!({"latent_scale": [1.0, 0.9, 1.1]}),
        };
        let ck = Checkpoint::from_store(meta, &ps);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ae.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.meta.kind, "ae");
        assert_eq!(loaded.meta.step, 17);
        assert_eq!(loaded.params.len(), 2);
        for ((n1, v1), (n2, v2)) in ck.params.iter().zip(loaded.params.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(v1.shape(), v2.shape());
            assert!(v1
                .iter()
                .zip(v2.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        assert_eq!(
            loaded.extra_f32_vec("latent_scale"),
            Some(vec![1.0, 0.9, 1.1])
        );

        let mut ps2 = sample_store();
        for v in ps2.value_mut(crate::nn::ParamId(0)).iter_mut() {
            *v = 0.0;
        }
        loaded.load_into(&mut ps2).unwrap();
        assert_eq!(store_digest(&ps2), store_digest(&ps));
    }

    #[test]
    fn load_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Checkpoint(_))));
    }
}
