//! Single-file training state persistence.
//!
//! Layout: a little-endian `u32` header length, a JSON header carrying the
//! model and optimizer configuration plus counters, then one snapshot
//! record per buffer (see [`crate::tensor::snapshot`]):
//!
//! - `live/<name>`: current parameters in the training dtype
//! - `ema/<name>`: EMA shadow, f64
//! - `opt/m/<name>`, `opt/v/<name>`: AdamW moments, f64
//!
//! The moment records make resumed training bitwise identical to an
//! uninterrupted run; loaders that only sample can ignore them. Save/load
//! round trips are byte-exact because JSON field order follows the struct
//! declaration and record order follows parameter registration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EmaState, NnError, OptimizerConfig, OptimizerState, Result, UNet, UNetConfig};
use crate::tensor::snapshot::{self, RawRecord};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub unet: UNetConfig,
    pub optim: OptimizerConfig,
    pub ema_beta: f64,
    /// Applied optimizer steps so far.
    pub step: u64,
    /// Master seed the run was launched with.
    pub seed: u64,
}

/// Everything needed to resume or sample.
pub struct Checkpoint<T: Scalar> {
    pub header: CheckpointHeader,
    pub model: UNet<T>,
    pub opt: OptimizerState,
    pub ema: EmaState,
}

impl<T: Scalar> Checkpoint<T> {
    /// The sampling network: same architecture as the live model, averaged
    /// weights.
    pub fn ema_model(&self) -> UNet<T> {
        UNet {
            config: self.model.config.clone(),
            params: self.ema.as_params(&self.model.params),
        }
    }
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    model: &UNet<T>,
    opt: &OptimizerState,
    ema: &EmaState,
    optim_config: &OptimizerConfig,
    seed: u64,
) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        unet: model.config.clone(),
        optim: optim_config.clone(),
        ema_beta: ema.beta,
        step: opt.step,
        seed,
    };
    let json = serde_json::to_vec(&header)
        .map_err(|e| NnError::MalformedCheckpoint(e.to_string()))?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    for (i, (name, t)) in model.params.iter().enumerate() {
        snapshot::write_record(&mut w, &format!("live/{name}"), t.shape(), t.data())?;
        snapshot::write_record(&mut w, &format!("ema/{name}"), t.shape(), ema.shadow_at(i))?;
        let (m, v) = opt.moments_at(i);
        snapshot::write_record(&mut w, &format!("opt/m/{name}"), t.shape(), m)?;
        snapshot::write_record(&mut w, &format!("opt/v/{name}"), t.shape(), v)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut len_buf = [0u8; 4];
    r.read_exact(&mut len_buf)?;
    let mut json = vec![0u8; u32::from_le_bytes(len_buf) as usize];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)
        .map_err(|e| NnError::MalformedCheckpoint(format!("header: {e}")))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(NnError::MalformedCheckpoint(format!(
            "version {} unsupported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let records = snapshot::read_all(&mut r)?;

    // rebuild the canonical parameter order from the config, then fill
    // every buffer from its record
    let mut model = UNet::<T>::new(header.unet.clone(), header.seed)?;
    let mut opt = OptimizerState::new(&model.params);
    opt.step = header.step;
    let mut ema = EmaState::new(&model.params, header.ema_beta);

    let find = |name: &str| -> Result<&RawRecord> {
        records
            .iter()
            .find(|rec| rec.name == name)
            .ok_or_else(|| NnError::MalformedCheckpoint(format!("missing record {name:?}")))
    };
    for i in 0..model.params.len() {
        let name = model.params.name_at(i).to_string();
        let shape = model.params.tensor_at(i).shape().to_vec();
        let live = find(&format!("live/{name}"))?;
        if live.shape != shape {
            return Err(NnError::MalformedCheckpoint(format!(
                "record live/{name} has shape {:?}, expected {shape:?}",
                live.shape
            )));
        }
        model.params.replace_at(i, Tensor::from_vec(shape.clone(), live.decode::<T>()?));
        ema.set_shadow(i, find(&format!("ema/{name}"))?.decode::<f64>()?);
        let m = find(&format!("opt/m/{name}"))?.decode::<f64>()?;
        let v = find(&format!("opt/v/{name}"))?.decode::<f64>()?;
        opt.set_moments(i, m, v);
    }
    let expected = 4 * model.params.len();
    if records.len() != expected {
        return Err(NnError::MalformedCheckpoint(format!(
            "{} records, expected {expected}",
            records.len()
        )));
    }
    Ok(Checkpoint { header, model, opt, ema })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn tiny() -> (UNet<f32>, OptimizerState, EmaState, OptimizerConfig) {
        let cfg = UNetConfig { in_channels: 2, out_channels: 1, base_channels: 4, levels: 1 };
        let model = UNet::new(cfg, 5).unwrap();
        let opt = OptimizerState::new(&model.params);
        let ema = EmaState::new(&model.params, 0.999);
        (model, opt, ema, OptimizerConfig::default())
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let dir = tempfile::tempdir().unwrap();
        let (mut model, mut opt, mut ema, ocfg) = tiny();
        // run one real step so moments and shadows are nontrivial
        let tape = Tape::new();
        let x = Tensor::ones(vec![1, 2, 4, 4, 4]);
        let y = model.forward(&tape, &x).unwrap();
        let target = Tensor::ones(y.shape().to_vec());
        let loss = tape.mse(&y, &target).unwrap();
        tape.backward(&loss).unwrap();
        drop(tape);
        super::super::optimizer_step(&mut model.params, &mut opt, &ocfg);
        ema.update(&model.params);

        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&p1, &model, &opt, &ema, &ocfg, 77).unwrap();
        let loaded = load_checkpoint::<f32>(&p1).unwrap();
        assert_eq!(loaded.header.step, 1);
        assert_eq!(loaded.header.seed, 77);
        save_checkpoint(&p2, &loaded.model, &loaded.opt, &loaded.ema, &loaded.header.optim, 77)
            .unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let (model, opt, ema, ocfg) = tiny();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &opt, &ema, &ocfg, 0).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        let x = Tensor::from_vec(vec![1, 2, 4, 4, 4], (0..128).map(|i| i as f32 * 0.01).collect());
        let a = model.forward(&Tape::new(), &x).unwrap();
        let b = loaded.model.forward(&Tape::new(), &x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn truncated_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (model, opt, ema, ocfg) = tiny();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &opt, &ema, &ocfg, 0).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint::<f32>(&path).is_err());
    }

    #[test]
    fn wrong_version_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (model, opt, ema, ocfg) = tiny();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &model, &opt, &ema, &ocfg, 0).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // bump the version field inside the JSON header
        let json_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[4..4 + json_len].to_vec()).unwrap();
        let patched = json.replacen("\"version\":1", "\"version\":9", 1);
        assert_ne!(json, patched);
        bytes.splice(4..4 + json_len, patched.into_bytes());
        bytes.splice(0..4, (json_len as u32).to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint::<f32>(&path) {
            Err(e) => assert!(e.to_string().contains("version")),
            Ok(_) => panic!("expected a version error"),
        }
    }
}
