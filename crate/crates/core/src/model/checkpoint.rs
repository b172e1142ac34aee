//! Checkpoint persistence (`CRGW`).
//!
//! Layout: magic bytes, little-endian `u32` version, `u64` header length,
//! UTF-8 JSON header, then named parameter records in a fixed order. Each
//! record is `u32` name length, name bytes, `u32` rank, `u64` per
//! dimension, the real part as `f64` little-endian, then the imaginary
//! part. Residual tensors are always written (zeros when the variant
//! disables them) so the record sequence is a pure function of the
//! architecture.

use super::{BnState, CfclParams, CrgalParams, CrgatConfig, CrgatModel};
use crate::error::{Error, Result};
use crate::rng::ALGORITHM_ID;
use crate::tensor::ComplexTensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CRGW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Training provenance stored alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    /// "pm" or "ldm" when the checkpoint came out of training.
    pub loss_kind: Option<String>,
    /// Whether optimizer state existed when saving (the state itself is
    /// not persisted).
    pub optimizer_state: bool,
    /// Final Lagrangian multipliers for LDM checkpoints.
    pub mu: Option<Vec<f64>>,
    pub epoch: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    config: CrgatConfig,
    meta: CheckpointMeta,
    rng_algorithm: String,
    bn_initialized: Vec<bool>,
}

fn write_record(w: &mut impl Write, name: &str, t: &ComplexTensor) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for d in t.shape() {
        w.write_all(&(*d as u64).to_le_bytes())?;
    }
    for v in t.re() {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in t.im() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn real_vec_tensor(v: &[f64]) -> ComplexTensor {
    ComplexTensor::from_re(vec![v.len()], v.to_vec()).unwrap()
}

pub fn write_checkpoint(model: &CrgatModel, meta: &CheckpointMeta, w: &mut impl Write) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        meta: meta.clone(),
        rng_algorithm: ALGORITHM_ID.to_string(),
        bn_initialized: model
            .cfcls
            .iter()
            .filter_map(|c| c.bn.as_ref().map(|b| b.initialized))
            .collect(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serialization cannot fail");
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(hjson.len() as u64).to_le_bytes())?;
    w.write_all(&hjson)?;
    for (l, lp) in model.crgals.iter().enumerate() {
        write_record(w, &format!("crgal{l}.attn"), &lp.attn)?;
        write_record(w, &format!("crgal{l}.theta"), &lp.theta)?;
        write_record(w, &format!("crgal{l}.theta_jump"), &lp.theta_jump)?;
        write_record(w, &format!("crgal{l}.theta_init"), &lp.theta_init)?;
        write_record(w, &format!("crgal{l}.a_jump"), &ComplexTensor::scalar(lp.a_jump, 0.0))?;
        write_record(w, &format!("crgal{l}.a_init"), &ComplexTensor::scalar(lp.a_init, 0.0))?;
    }
    for (c, cp) in model.cfcls.iter().enumerate() {
        write_record(w, &format!("cfcl{c}.theta"), &cp.theta)?;
        if let Some(bn) = &cp.bn {
            write_record(w, &format!("cfcl{c}.bn_gamma"), &bn.gamma)?;
            write_record(w, &format!("cfcl{c}.bn_beta"), &bn.beta)?;
            write_record(w, &format!("cfcl{c}.bn_run_mean"), &mean_tensor(bn))?;
            write_record(w, &format!("cfcl{c}.bn_run_var"), &var_tensor(bn))?;
        }
    }
    Ok(())
}

fn mean_tensor(bn: &BnState) -> ComplexTensor {
    ComplexTensor::from_parts(
        vec![bn.run_mean_re.len()],
        bn.run_mean_re.clone(),
        bn.run_mean_im.clone(),
    )
    .unwrap()
}

fn var_tensor(bn: &BnState) -> ComplexTensor {
    ComplexTensor::from_parts(vec![bn.run_var_re.len()], bn.run_var_re.clone(), bn.run_var_im.clone()).unwrap()
}

pub fn save_checkpoint(model: &CrgatModel, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(model, meta, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

struct RecordReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RecordReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(
                self.bytes.len() as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn record(&mut self, expect_name: &str) -> Result<ComplexTensor> {
        let at = self.pos as u64;
        let nlen = u32::from_le_bytes(self.take(4, "record name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(self.take(nlen, "record name")?)
            .map_err(|e| Error::format(at, format!("record name utf8: {e}")))?;
        if name != expect_name {
            return Err(Error::format(at, format!("record {name:?} where {expect_name:?} was expected")));
        }
        let rank = u32::from_le_bytes(self.take(4, "record rank")?.try_into().unwrap()) as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u64::from_le_bytes(self.take(8, "record dim")?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let mut re = vec![0.0; n];
        let mut im = vec![0.0; n];
        let rb = self.take(8 * n, "record re data")?;
        for i in 0..n {
            re[i] = f64::from_le_bytes(rb[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        let ib = self.take(8 * n, "record im data")?;
        for i in 0..n {
            im[i] = f64::from_le_bytes(ib[i * 8..(i + 1) * 8].try_into().unwrap());
        }
        ComplexTensor::from_parts(shape, re, im)
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<(CrgatModel, CheckpointMeta)> {
    let mut r = RecordReader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format(0, format!("bad magic {:?}, expected \"CRGW\"", magic)));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(r.take(8, "header length")?.try_into().unwrap()) as usize;
    let hstart = r.pos as u64;
    let header: CheckpointHeader = serde_json::from_slice(r.take(hlen, "header")?)
        .map_err(|e| Error::format(hstart, format!("header json: {e}")))?;
    header.config.validate().map_err(|e| Error::format(hstart, format!("bad config: {e}")))?;

    let cfg = header.config.clone();
    let n_t = cfg.n_t();
    let mut crgals = Vec::new();
    for (l, lcfg) in cfg.crgals.iter().enumerate() {
        let attn = check_shape(r.record(&format!("crgal{l}.attn"))?, &[lcfg.heads, lcfg.head_dim])?;
        let theta = check_shape(
            r.record(&format!("crgal{l}.theta"))?,
            &[lcfg.heads, lcfg.in_dim, lcfg.head_dim],
        )?;
        let theta_jump = check_shape(
            r.record(&format!("crgal{l}.theta_jump"))?,
            &[lcfg.in_dim, lcfg.out_dim()],
        )?;
        let theta_init = check_shape(
            r.record(&format!("crgal{l}.theta_init"))?,
            &[n_t, lcfg.out_dim()],
        )?;
        let a_jump = r.record(&format!("crgal{l}.a_jump"))?.re()[0];
        let a_init = r.record(&format!("crgal{l}.a_init"))?.re()[0];
        crgals.push(CrgalParams { attn, theta, theta_jump, theta_init, a_jump, a_init });
    }
    let mut bn_flags = header.bn_initialized.iter();
    let mut cfcls = Vec::new();
    for (c, ccfg) in cfg.cfcls.iter().enumerate() {
        let theta = check_shape(r.record(&format!("cfcl{c}.theta"))?, &[ccfg.in_dim, ccfg.out_dim])?;
        let bn = if ccfg.batch_norm {
            let gamma = check_shape(r.record(&format!("cfcl{c}.bn_gamma"))?, &[1, ccfg.out_dim])?;
            let beta = check_shape(r.record(&format!("cfcl{c}.bn_beta"))?, &[1, ccfg.out_dim])?;
            let mean = check_shape(r.record(&format!("cfcl{c}.bn_run_mean"))?, &[ccfg.out_dim])?;
            let var = check_shape(r.record(&format!("cfcl{c}.bn_run_var"))?, &[ccfg.out_dim])?;
            if var.re().iter().chain(var.im()).any(|&v| v < 0.0) {
                return Err(Error::format(0, "negative running variance".to_string()));
            }
            Some(BnState {
                gamma,
                beta,
                run_mean_re: mean.re().to_vec(),
                run_mean_im: mean.im().to_vec(),
                run_var_re: var.re().to_vec(),
                run_var_im: var.im().to_vec(),
                initialized: *bn_flags.next().ok_or_else(|| {
                    Error::format(hstart, "bn_initialized shorter than batch-norm layer count".to_string())
                })?,
            })
        } else {
            None
        };
        cfcls.push(CfclParams { theta, bn });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((CrgatModel { config: cfg, crgals, cfcls }, header.meta))
}

fn check_shape(t: ComplexTensor, want: &[usize]) -> Result<ComplexTensor> {
    if t.shape() != want {
        return Err(Error::format(
            0,
            format!("parameter shape {:?} does not match config shape {:?}", t.shape(), want),
        ));
    }
    Ok(t)
}

pub fn load_checkpoint(path: &Path) -> Result<(CrgatModel, CheckpointMeta)> {
    let bytes = std::fs::read(path)?;
    read_checkpoint(&bytes)
}

/// Serialized parameter-record byte size (excluding header); used to
/// verify that the parameter footprint does not depend on the user count.
pub fn parameter_byte_size(model: &CrgatModel) -> usize {
    struct CountWriter(usize);
    impl Write for CountWriter {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.0 += buf.len();
            Ok(buf.len())
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }
    let mut full = CountWriter(0);
    write_checkpoint(model, &CheckpointMeta::default(), &mut full).expect("counting writer cannot fail");
    full.0
}
