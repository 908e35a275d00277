//! Byte-exact binary checkpoints ("DFEM").
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic "DFEM" | version u32 | hp_len u32 | hp JSON
//! tensor_count u32 | { name_len u32 | name | dtype u8 | ndim u32 | dims u32.. | f32 data } ..
//! opt_present u8 | [ t u64 | lr f64 | beta1 f64 | beta2 f64 | eps f64 | wd f64 | m tensors | v tensors ]
//! rng seed [u8;32] | stream u64 | word_pos u128
//! epoch u32
//! ```
//!
//! Model tensors are stored as f32; training keeps f64 masters and rounds
//! once at save time, so a checkpoint loads back to exactly the model it
//! describes and save -> load -> save is byte-identical.

use crate::error::{Error, Result};
use crate::model::{canonical_param_names, Hyperparams, ModelParams};
use crate::optim::AdamState;
use crate::rng::RngState;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"DFEM";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;
/// Upper bound on serialized field sizes; a corrupt header must not
/// trigger a giant allocation.
const MAX_FIELD: usize = 1 << 30;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: &str, t: &Tensor) -> Self {
        NamedTensor { name: name.to_string(), shape: t.shape.clone(), data: t.to_f32() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_f32(self.shape.clone(), &self.data)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptSnapshot {
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub hp: Hyperparams,
    pub tensors: Vec<NamedTensor>,
    pub opt: Option<OptSnapshot>,
    pub rng: RngState,
    pub epoch: u32,
}

impl Checkpoint {
    pub fn from_training(
        hp: &Hyperparams,
        params: &ModelParams,
        opt: Option<&AdamState>,
        rng: &RngState,
        epoch: u32,
        extra: &[NamedTensor],
    ) -> Self {
        let mut tensors: Vec<NamedTensor> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| NamedTensor::from_tensor(&n, t))
            .collect();
        tensors.extend_from_slice(extra);
        let opt = opt.map(|a| {
            let names = canonical_param_names(hp);
            OptSnapshot {
                t: a.t,
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                weight_decay: a.weight_decay,
                m: names
                    .iter()
                    .zip(&a.m)
                    .map(|(n, t)| NamedTensor::from_tensor(n, t))
                    .collect(),
                v: names
                    .iter()
                    .zip(&a.v)
                    .map(|(n, t)| NamedTensor::from_tensor(n, t))
                    .collect(),
            }
        });
        Checkpoint { hp: hp.clone(), tensors, opt, rng: rng.clone(), epoch }
    }

    /// Reassembles the model (f32 -> f64) and validates every shape.
    pub fn to_model(&self) -> Result<ModelParams> {
        let by_name: HashMap<&str, &NamedTensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut ordered = Vec::new();
        for name in canonical_param_names(&self.hp) {
            let t = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::Corrupt(format!("missing tensor `{name}`")))?;
            ordered.push(t.to_tensor());
        }
        let params = ModelParams::from_flat(&self.hp, &ordered)?;
        params.check_shapes(&self.hp)?;
        Ok(params)
    }

    /// Named auxiliary tensor (e.g. standardization stats), if present.
    pub fn extra(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Checkpoint::read_from(&mut bytes.as_slice())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let hp = serde_json::to_vec(&self.hp).map_err(|e| Error::Corrupt(e.to_string()))?;
        w.write_all(&(hp.len() as u32).to_le_bytes())?;
        w.write_all(&hp)?;
        write_tensor_list(w, &self.tensors)?;
        match &self.opt {
            None => w.write_all(&[0u8])?,
            Some(opt) => {
                w.write_all(&[1u8])?;
                w.write_all(&opt.t.to_le_bytes())?;
                for v in [opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay] {
                    w.write_all(&v.to_le_bytes())?;
                }
                write_tensor_list(w, &opt.m)?;
                write_tensor_list(w, &opt.v)?;
            }
        }
        w.write_all(&self.rng.seed)?;
        w.write_all(&self.rng.stream.to_le_bytes())?;
        w.write_all(&self.rng.word_pos.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(r, &mut magic)?;
        if magic != MAGIC {
            return Err(Error::BadMagic { expected: MAGIC, got: magic });
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: VERSION });
        }
        let hp_len = read_u32(r)? as usize;
        if hp_len > MAX_FIELD {
            return Err(Error::Corrupt(format!("hyperparameter block of {hp_len} bytes")));
        }
        let mut hp_bytes = vec![0u8; hp_len];
        read_exact(r, &mut hp_bytes)?;
        let hp: Hyperparams = serde_json::from_slice(&hp_bytes)
            .map_err(|e| Error::Corrupt(format!("hyperparameter block: {e}")))?;
        hp.validate()?;
        let tensors = read_tensor_list(r)?;
        let mut flag = [0u8; 1];
        read_exact(r, &mut flag)?;
        let opt = match flag[0] {
            0 => None,
            1 => {
                let t = read_u64(r)?;
                let mut f = [0f64; 5];
                for v in f.iter_mut() {
                    *v = read_f64(r)?;
                }
                let m = read_tensor_list(r)?;
                let v = read_tensor_list(r)?;
                Some(OptSnapshot {
                    t,
                    lr: f[0],
                    beta1: f[1],
                    beta2: f[2],
                    eps: f[3],
                    weight_decay: f[4],
                    m,
                    v,
                })
            }
            other => return Err(Error::Corrupt(format!("optimizer flag {other}"))),
        };
        let mut seed = [0u8; 32];
        read_exact(r, &mut seed)?;
        let stream = read_u64(r)?;
        let mut wp = [0u8; 16];
        read_exact(r, &mut wp)?;
        let word_pos = u128::from_le_bytes(wp);
        let epoch = read_u32(r)?;
        Ok(Checkpoint {
            hp,
            tensors,
            opt,
            rng: RngState { seed, stream, word_pos },
            epoch,
        })
    }
}

fn write_tensor_list(w: &mut impl Write, list: &[NamedTensor]) -> Result<()> {
    w.write_all(&(list.len() as u32).to_le_bytes())?;
    for t in list {
        let name = t.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[DTYPE_F32])?;
        w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
        for &d in &t.shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in &t.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_tensor_list(r: &mut impl Read) -> Result<Vec<NamedTensor>> {
    let count = read_u32(r)? as usize;
    if count > 1 << 20 {
        return Err(Error::Corrupt(format!("tensor count {count}")));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::Corrupt(format!("tensor name of {name_len} bytes")));
        }
        let mut name = vec![0u8; name_len];
        read_exact(r, &mut name)?;
        let name =
            String::from_utf8(name).map_err(|_| Error::Corrupt("tensor name not UTF-8".into()))?;
        let mut dtype = [0u8; 1];
        read_exact(r, &mut dtype)?;
        if dtype[0] != DTYPE_F32 {
            return Err(Error::Corrupt(format!("unsupported dtype {}", dtype[0])));
        }
        let ndim = read_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::Corrupt(format!("tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut numel: usize = 1;
        for _ in 0..ndim {
            let d = read_u32(r)? as usize;
            numel = numel.saturating_mul(d);
            shape.push(d);
        }
        if numel > MAX_FIELD / 4 {
            return Err(Error::Corrupt(format!("tensor `{name}` with {numel} elements")));
        }
        let mut data = vec![0f32; numel];
        let mut bytes = vec![0u8; numel * 4];
        read_exact(r, &mut bytes)?;
        for (i, chunk) in bytes.chunks_exact(4).enumerate() {
            data[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        out.push(NamedTensor { name, shape, data });
    }
    Ok(out)
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Corrupt("unexpected end of file".into())
        } else {
            Error::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::rng::{substream, STREAM_INIT, STREAM_TRAIN};

    fn small_checkpoint() -> Checkpoint {
        let hp = Hyperparams {
            input_dim: 6,
            tokens: 2,
            token_dim: 3,
            hidden: 8,
            layers: 1,
            heads: 2,
            latent_dim: 4,
            codebook_size: 4,
            stages: 2,
            ..Hyperparams::default()
        };
        let mut rng = substream(3, STREAM_INIT);
        let params = init_params(&hp, &mut rng);
        let (_, tensors) = params.flatten();
        let adam = AdamState::new(hp.lr, hp.weight_decay, &tensors);
        let rng_state = RngState::capture(&substream(3, STREAM_TRAIN));
        Checkpoint::from_training(&hp, &params, Some(&adam), &rng_state, 7, &[])
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let ck = small_checkpoint();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        let mut bytes2 = Vec::new();
        back.write_to(&mut bytes2).unwrap();
        assert_eq!(bytes, bytes2);
        assert_eq!(ck, back);
    }

    #[test]
    fn model_rebuild_is_exact_after_roundtrip() {
        let ck = small_checkpoint();
        let before = ck.to_model().unwrap();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let after = Checkpoint::read_from(&mut bytes.as_slice()).unwrap().to_model().unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let ck = small_checkpoint();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        match Checkpoint::read_from(&mut bytes.as_slice()) {
            Err(Error::BadMagic { got, .. }) => assert_eq!(&got, b"XXXX"),
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn version_skew_is_rejected() {
        let ck = small_checkpoint();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        match Checkpoint::read_from(&mut bytes.as_slice()) {
            Err(Error::UnsupportedVersion { found: 99, .. }) => {}
            other => panic!("expected UnsupportedVersion, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_a_structured_error() {
        let ck = small_checkpoint();
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        for cut in [3, 9, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::read_from(&mut &bytes[..cut]) {
                Err(Error::Corrupt(_)) => {}
                other => panic!("cut at {cut}: expected Corrupt, got {other:?}"),
            }
        }
    }

    #[test]
    fn shape_mismatch_against_hyperparams_is_rejected() {
        let mut ck = small_checkpoint();
        // claim a different codebook size than the tensor carries
        ck.hp.codebook_size = 8;
        let mut bytes = Vec::new();
        ck.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&mut bytes.as_slice()).unwrap();
        assert!(matches!(back.to_model(), Err(Error::Corrupt(_))));
    }
}
