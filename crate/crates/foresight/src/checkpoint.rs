//! Binary model checkpoints.
//!
//! Little-endian layout: magic "FAPC", version u16, kind u8, a length-prefixed
//! JSON architecture config, a token list (captioner vocabulary, empty for
//! the predictor), then length-prefixed name/shape/data triples for every
//! parameter in model order. Values are raw f64 bits, so a load reproduces
//! the saved model's predictions exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::captioner::{build_captioner, CaptionerModel, Seq2SeqConfig, Vocabulary};
use crate::nd::Tensor;
use crate::predictor::{build_predictor, FeatureDims, PredictorConfig, PredictorModel};

pub const MAGIC: [u8; 4] = *b"FAPC";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {VERSION})")]
    VersionMismatch { found: u16 },
    #[error("checkpoint is corrupt: {0}")]
    Corrupt(String),
    #[error("checkpoint does not fit the rebuilt model: {0}")]
    ModelMismatch(String),
    #[error("checkpoint holds a {found}, not a {expected}")]
    WrongKind {
        expected: &'static str,
        found: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Predictor,
    Captioner,
}

impl CheckpointKind {
    fn code(self) -> u8 {
        match self {
            CheckpointKind::Predictor => 1,
            CheckpointKind::Captioner => 2,
        }
    }

    fn from_code(code: u8) -> Result<Self, CheckpointError> {
        match code {
            1 => Ok(CheckpointKind::Predictor),
            2 => Ok(CheckpointKind::Captioner),
            other => Err(CheckpointError::Corrupt(format!(
                "unknown checkpoint kind {other}"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            CheckpointKind::Predictor => "predictor",
            CheckpointKind::Captioner => "captioner",
        }
    }
}

#[derive(Serialize, Deserialize)]
struct PredictorArch {
    config: PredictorConfig,
    dims: FeatureDims,
    time_norm: Option<(f64, f64)>,
}

#[derive(Serialize, Deserialize)]
struct CaptionerArch {
    config: Seq2SeqConfig,
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

struct Writer<W: Write> {
    out: W,
}

impl<W: Write> Writer<W> {
    fn u16(&mut self, v: u16) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.out.write_all(&v.to_le_bytes())
    }
    fn bytes(&mut self, v: &[u8]) -> std::io::Result<()> {
        self.u32(v.len() as u32)?;
        self.out.write_all(v)
    }
    fn tensor(&mut self, t: &Tensor) -> std::io::Result<()> {
        self.u32(t.shape().len() as u32)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        self.u64(t.numel() as u64)?;
        for &v in t.data() {
            self.out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inp: R,
}

impl<R: Read> Reader<R> {
    fn u16(&mut self) -> Result<u16, CheckpointError> {
        let mut buf = [0u8; 2];
        self.fill(&mut buf)?;
        Ok(u16::from_le_bytes(buf))
    }
    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut buf = [0u8; 4];
        self.fill(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }
    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }
    fn f64(&mut self) -> Result<f64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.fill(&mut buf)?;
        Ok(f64::from_le_bytes(buf))
    }
    fn fill(&mut self, buf: &mut [u8]) -> Result<(), CheckpointError> {
        self.inp
            .read_exact(buf)
            .map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))
    }
    fn bytes(&mut self) -> Result<Vec<u8>, CheckpointError> {
        let len = self.u32()? as usize;
        if len > 1 << 30 {
            return Err(CheckpointError::Corrupt(format!(
                "implausible section length {len}"
            )));
        }
        let mut buf = vec![0u8; len];
        self.fill(&mut buf)?;
        Ok(buf)
    }
    fn string(&mut self) -> Result<String, CheckpointError> {
        String::from_utf8(self.bytes()?)
            .map_err(|_| CheckpointError::Corrupt("non-utf8 string".into()))
    }
    fn tensor(&mut self) -> Result<Tensor, CheckpointError> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {ndim} tensor")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64()? as usize);
        }
        let numel = self.u64()? as usize;
        if numel != shape.iter().product::<usize>() || numel > 1 << 28 {
            return Err(CheckpointError::Corrupt("tensor size mismatch".into()));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(self.f64()?);
        }
        Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))
    }
}

fn write_checkpoint(
    path: &Path,
    kind: CheckpointKind,
    config_json: &str,
    vocab: &[String],
    params: &[(&str, &Tensor)],
) -> Result<(), CheckpointError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = Writer {
        out: BufWriter::new(file),
    };
    (|| -> std::io::Result<()> {
        w.out.write_all(&MAGIC)?;
        w.u16(VERSION)?;
        w.out.write_all(&[kind.code()])?;
        w.bytes(config_json.as_bytes())?;
        w.u32(vocab.len() as u32)?;
        for token in vocab {
            w.bytes(token.as_bytes())?;
        }
        w.u32(params.len() as u32)?;
        for (name, tensor) in params {
            w.bytes(name.as_bytes())?;
            w.tensor(tensor)?;
        }
        w.out.flush()
    })()
    .map_err(|e| io_err(path, e))
}

struct RawCheckpoint {
    kind: CheckpointKind,
    config_json: String,
    vocab: Vec<String>,
    params: Vec<(String, Tensor)>,
}

fn read_checkpoint(path: &Path) -> Result<RawCheckpoint, CheckpointError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        inp: BufReader::new(file),
    };
    let mut magic = [0u8; 4];
    r.fill(&mut magic)?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch { found: version });
    }
    let mut kind_byte = [0u8; 1];
    r.fill(&mut kind_byte)?;
    let kind = CheckpointKind::from_code(kind_byte[0])?;
    let config_json = r.string()?;
    let n_vocab = r.u32()? as usize;
    let mut vocab = Vec::with_capacity(n_vocab);
    for _ in 0..n_vocab {
        vocab.push(r.string()?);
    }
    let n_params = r.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = r.string()?;
        let tensor = r.tensor()?;
        params.push((name, tensor));
    }
    Ok(RawCheckpoint {
        kind,
        config_json,
        vocab,
        params,
    })
}

/// Kind of model stored at `path`, without loading it.
pub fn read_kind(path: &Path) -> Result<CheckpointKind, CheckpointError> {
    Ok(read_checkpoint(path)?.kind)
}

fn restore_params(
    params: Vec<(String, Tensor)>,
    model_params: Vec<&mut crate::nd::Parameter>,
) -> Result<(), CheckpointError> {
    if params.len() != model_params.len() {
        return Err(CheckpointError::ModelMismatch(format!(
            "{} stored parameters, model has {}",
            params.len(),
            model_params.len()
        )));
    }
    for ((name, tensor), param) in params.into_iter().zip(model_params) {
        if name != param.name {
            return Err(CheckpointError::ModelMismatch(format!(
                "parameter order mismatch: stored `{name}`, expected `{}`",
                param.name
            )));
        }
        if tensor.shape() != param.value.shape() {
            return Err(CheckpointError::ModelMismatch(format!(
                "parameter `{name}` shape {:?} does not match model {:?}",
                tensor.shape(),
                param.value.shape()
            )));
        }
        param.value = tensor;
        param.zero_grad();
    }
    Ok(())
}

pub fn save_predictor(path: &Path, model: &PredictorModel) -> Result<(), CheckpointError> {
    let arch = PredictorArch {
        config: model.cfg.clone(),
        dims: model.dims,
        time_norm: model.time_norm,
    };
    let config_json = serde_json::to_string(&arch).expect("predictor arch serializes");
    let params: Vec<(&str, &Tensor)> = model
        .parameters()
        .into_iter()
        .map(|p| (p.name.as_str(), &p.value))
        .collect();
    write_checkpoint(path, CheckpointKind::Predictor, &config_json, &[], &params)
}

pub fn load_predictor(path: &Path) -> Result<PredictorModel, CheckpointError> {
    let raw = read_checkpoint(path)?;
    if raw.kind != CheckpointKind::Predictor {
        return Err(CheckpointError::WrongKind {
            expected: "predictor",
            found: raw.kind.name(),
        });
    }
    let arch: PredictorArch = serde_json::from_str(&raw.config_json)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let mut model = build_predictor(&arch.config, arch.dims, 0)
        .map_err(|e| CheckpointError::ModelMismatch(e.to_string()))?;
    model.time_norm = arch.time_norm;
    restore_params(raw.params, model.parameters_mut())?;
    Ok(model)
}

pub fn save_captioner(path: &Path, model: &CaptionerModel) -> Result<(), CheckpointError> {
    let arch = CaptionerArch {
        config: model.cfg.clone(),
    };
    let config_json = serde_json::to_string(&arch).expect("captioner arch serializes");
    let params: Vec<(&str, &Tensor)> = model
        .parameters()
        .into_iter()
        .map(|p| (p.name.as_str(), &p.value))
        .collect();
    write_checkpoint(
        path,
        CheckpointKind::Captioner,
        &config_json,
        model.vocab.tokens(),
        &params,
    )
}

pub fn load_captioner(path: &Path) -> Result<CaptionerModel, CheckpointError> {
    let raw = read_checkpoint(path)?;
    if raw.kind != CheckpointKind::Captioner {
        return Err(CheckpointError::WrongKind {
            expected: "captioner",
            found: raw.kind.name(),
        });
    }
    let arch: CaptionerArch = serde_json::from_str(&raw.config_json)
        .map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
    let vocab = Vocabulary::from_tokens(raw.vocab);
    let mut model = build_captioner(&arch.config, vocab, 0)
        .map_err(|e| CheckpointError::ModelMismatch(e.to_string()))?;
    restore_params(raw.params, model.parameters_mut())?;
    Ok(model)
}
