//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "HSVRCKPT"
//! u32    format version
//! u32    config length, then the config as compact JSON
//! u64    completed epochs
//! u8     rng present; if 1: 32-byte seed, u64 stream, u128 word position
//! u8     optimizer present; if 1: u64 step
//! u32    block count, then one mode tag byte per block
//! u32    tensor count, then per tensor:
//!        u16 name length, name, u8 rank, u64 per dimension, f64 data (column-major)
//! ```
//!
//! Tensors are written in a fixed order and read back by name, so saving a
//! loaded checkpoint reproduces the file byte for byte.

use std::path::{Path, PathBuf};

use hsvr_core::compress::{DiagonalSsm, ReducedSsm, ReducedSystem};
use hsvr_core::lti::{DenseSsm, RotationSsm};
use hsvr_core::net::{AdamW, Block, Norm, SequenceModel, SsmLayer, TrainConfig};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"HSVRCKPT";
pub const FORMAT_VERSION: u32 = 1;

const TAG_ROTATION: u8 = 0;
const TAG_DENSE: u8 = 1;
const TAG_DIAGONAL: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SequenceModel,
    pub optimizer: Option<AdamW>,
    pub rng: Option<ChaCha8Rng>,
    pub epoch: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    fn matrix(name: String, m: &DMatrix<f64>) -> Self {
        Self {
            name,
            shape: vec![m.nrows(), m.ncols()],
            data: m.as_slice().to_vec(),
        }
    }

    fn vector(name: String, v: &[f64]) -> Self {
        Self {
            name,
            shape: vec![v.len()],
            data: v.to_vec(),
        }
    }

    fn scalar(name: String, v: f64) -> Self {
        Self {
            name,
            shape: vec![],
            data: vec![v],
        }
    }
}

fn model_tensors(model: &SequenceModel) -> (Vec<u8>, Vec<Tensor>) {
    let mut tags = Vec::with_capacity(model.blocks.len());
    let mut out = vec![
        Tensor::matrix("encoder.w".into(), &model.encoder_w),
        Tensor::vector("encoder.b".into(), model.encoder_b.as_slice()),
    ];
    for (i, block) in model.blocks.iter().enumerate() {
        let pre = format!("blocks.{i}");
        out.push(Tensor::vector(format!("{pre}.norm.gamma"), block.norm.gamma.as_slice()));
        out.push(Tensor::vector(format!("{pre}.norm.beta"), block.norm.beta.as_slice()));
        out.push(Tensor::vector(
            format!("{pre}.norm.running_mean"),
            block.norm.running_mean.as_slice(),
        ));
        out.push(Tensor::vector(
            format!("{pre}.norm.running_var"),
            block.norm.running_var.as_slice(),
        ));
        match &block.ssm {
            SsmLayer::Rotation(s) => {
                tags.push(TAG_ROTATION);
                out.push(Tensor::vector(format!("{pre}.ssm.rho_raw"), &s.rho_raw));
                out.push(Tensor::vector(format!("{pre}.ssm.alpha_raw"), &s.alpha_raw));
                out.push(Tensor::matrix(format!("{pre}.ssm.b_learn"), &s.b_learn));
                out.push(Tensor::matrix(format!("{pre}.ssm.c"), &s.c));
                out.push(Tensor::vector(format!("{pre}.ssm.d"), &s.d));
            }
            SsmLayer::Reduced(r) => {
                out.push(Tensor::scalar(format!("{pre}.ssm.truncated_tail"), r.truncated_tail));
                match &r.system {
                    ReducedSystem::DenseReal(s) => {
                        tags.push(TAG_DENSE);
                        out.push(Tensor::matrix(format!("{pre}.ssm.a"), &s.a));
                        out.push(Tensor::matrix(format!("{pre}.ssm.b"), &s.b));
                        out.push(Tensor::matrix(format!("{pre}.ssm.c"), &s.c));
                        out.push(Tensor::matrix(format!("{pre}.ssm.d"), &s.d));
                    }
                    ReducedSystem::DiagonalComplex(s) => {
                        tags.push(TAG_DIAGONAL);
                        let re: Vec<f64> = s.lambda.iter().map(|z| z.re).collect();
                        let im: Vec<f64> = s.lambda.iter().map(|z| z.im).collect();
                        out.push(Tensor::vector(format!("{pre}.ssm.lambda_re"), &re));
                        out.push(Tensor::vector(format!("{pre}.ssm.lambda_im"), &im));
                        out.push(Tensor::matrix(format!("{pre}.ssm.b_re"), &s.b.map(|z| z.re)));
                        out.push(Tensor::matrix(format!("{pre}.ssm.b_im"), &s.b.map(|z| z.im)));
                        out.push(Tensor::matrix(format!("{pre}.ssm.c_re"), &s.c.map(|z| z.re)));
                        out.push(Tensor::matrix(format!("{pre}.ssm.c_im"), &s.c.map(|z| z.im)));
                        out.push(Tensor::matrix(format!("{pre}.ssm.d"), &s.d));
                    }
                }
            }
        }
        out.push(Tensor::matrix(format!("{pre}.gate"), &block.gate));
    }
    out.push(Tensor::matrix("decoder.w".into(), &model.decoder_w));
    out.push(Tensor::vector("decoder.b".into(), model.decoder_b.as_slice()));
    (tags, out)
}

impl Checkpoint {
    pub fn new(model: SequenceModel) -> Self {
        Self {
            model,
            optimizer: None,
            rng: None,
            epoch: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CliError> {
        let mut w = Vec::new();
        w.extend_from_slice(MAGIC);
        w.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.model.config).map_err(|e| CliError::Data(e.to_string()))?;
        w.extend_from_slice(&(config.len() as u32).to_le_bytes());
        w.extend_from_slice(&config);
        w.extend_from_slice(&(self.epoch as u64).to_le_bytes());
        match &self.rng {
            Some(rng) => {
                w.push(1);
                w.extend_from_slice(&rng.get_seed());
                w.extend_from_slice(&rng.get_stream().to_le_bytes());
                w.extend_from_slice(&rng.get_word_pos().to_le_bytes());
            }
            None => w.push(0),
        }
        let (tags, mut tensors) = model_tensors(&self.model);
        match &self.optimizer {
            Some(opt) => {
                w.push(1);
                w.extend_from_slice(&opt.step.to_le_bytes());
                tensors.push(Tensor::vector(
                    "optim.hyper".into(),
                    &[opt.lr, opt.beta1, opt.beta2, opt.eps, opt.weight_decay],
                ));
                tensors.push(Tensor::vector("optim.m".into(), &opt.m));
                tensors.push(Tensor::vector("optim.v".into(), &opt.v));
            }
            None => w.push(0),
        }
        w.extend_from_slice(&(tags.len() as u32).to_le_bytes());
        w.extend_from_slice(&tags);
        w.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in &tensors {
            w.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            w.extend_from_slice(t.name.as_bytes());
            w.push(t.shape.len() as u8);
            for &d in &t.shape {
                w.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &t.data {
                w.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(w)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CliError::Data("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CliError::Data(format!(
                "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let config: TrainConfig =
            serde_json::from_slice(r.take(len)?).map_err(|e| CliError::Data(format!("checkpoint config: {e}")))?;
        let epoch = r.u64()? as usize;
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                let mut rng = ChaCha8Rng::from_seed(seed);
                rng.set_stream(stream);
                rng.set_word_pos(word_pos);
                Some(rng)
            }
            f => return Err(CliError::Data(format!("bad rng flag {f}"))),
        };
        let optim_step = match r.u8()? {
            0 => None,
            1 => Some(r.u64()?),
            f => return Err(CliError::Data(format!("bad optimizer flag {f}"))),
        };
        let blocks = r.u32()? as usize;
        let tags = r.take(blocks)?.to_vec();
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CliError::Data("tensor name is not UTF-8".into()))?;
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel.ok_or_else(|| CliError::Data(format!("tensor {name} is too large")))?;
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| CliError::Data("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(CliError::Data("trailing bytes after checkpoint".into()));
        }
        let mut ts = Tensors { list: tensors, next: 0 };
        let model = build_model(config, &tags, &mut ts)?;
        let optimizer = match optim_step {
            Some(step) => {
                let hyper = ts.vector("optim.hyper")?;
                if hyper.len() != 5 {
                    return Err(CliError::Data("optimizer hyperparameters malformed".into()));
                }
                let m = ts.vector("optim.m")?;
                let v = ts.vector("optim.v")?;
                if m.len() != v.len() {
                    return Err(CliError::Data("optimizer moments differ in length".into()));
                }
                Some(AdamW {
                    lr: hyper[0],
                    beta1: hyper[1],
                    beta2: hyper[2],
                    eps: hyper[3],
                    weight_decay: hyper[4],
                    step,
                    m,
                    v,
                })
            }
            None => None,
        };
        if ts.next != ts.list.len() {
            return Err(CliError::Data(format!("unexpected tensor {}", ts.list[ts.next].name)));
        }
        Ok(Self {
            model,
            optimizer,
            rng,
            epoch,
        })
    }

    /// Writes the checkpoint and its JSON config sidecar (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))?;
        let sidecar = sidecar_path(path);
        let json = serde_json::to_string_pretty(&self.model.config).map_err(|e| CliError::Data(e.to_string()))?;
        std::fs::write(&sidecar, json + "\n").map_err(|e| CliError::io(&sidecar, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::Data("checkpoint file is truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CliError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

struct Tensors {
    list: Vec<Tensor>,
    next: usize,
}

impl Tensors {
    fn take(&mut self, name: &str, rank: usize) -> Result<Tensor, CliError> {
        let t = self
            .list
            .get(self.next)
            .ok_or_else(|| CliError::Data(format!("missing tensor {name}")))?;
        if t.name != name {
            return Err(CliError::Data(format!("expected tensor {name}, found {}", t.name)));
        }
        if t.shape.len() != rank {
            return Err(CliError::Data(format!(
                "tensor {name} has rank {}, expected {rank}",
                t.shape.len()
            )));
        }
        self.next += 1;
        Ok(t.clone())
    }

    fn matrix(&mut self, name: &str) -> Result<DMatrix<f64>, CliError> {
        let t = self.take(name, 2)?;
        Ok(DMatrix::from_column_slice(t.shape[0], t.shape[1], &t.data))
    }

    fn vector(&mut self, name: &str) -> Result<Vec<f64>, CliError> {
        Ok(self.take(name, 1)?.data)
    }

    fn scalar(&mut self, name: &str) -> Result<f64, CliError> {
        Ok(self.take(name, 0)?.data[0])
    }
}

fn build_model(config: TrainConfig, tags: &[u8], ts: &mut Tensors) -> Result<SequenceModel, CliError> {
    let core = |e: hsvr_core::Error| CliError::Data(format!("checkpoint: {e}"));
    let encoder_w = ts.matrix("encoder.w")?;
    let encoder_b = DVector::from_vec(ts.vector("encoder.b")?);
    let mut blocks = Vec::with_capacity(tags.len());
    for (i, &tag) in tags.iter().enumerate() {
        let pre = format!("blocks.{i}");
        let norm = Norm {
            gamma: DVector::from_vec(ts.vector(&format!("{pre}.norm.gamma"))?),
            beta: DVector::from_vec(ts.vector(&format!("{pre}.norm.beta"))?),
            running_mean: DVector::from_vec(ts.vector(&format!("{pre}.norm.running_mean"))?),
            running_var: DVector::from_vec(ts.vector(&format!("{pre}.norm.running_var"))?),
        };
        let ssm = match tag {
            TAG_ROTATION => SsmLayer::Rotation(
                RotationSsm::new(
                    ts.vector(&format!("{pre}.ssm.rho_raw"))?,
                    ts.vector(&format!("{pre}.ssm.alpha_raw"))?,
                    ts.matrix(&format!("{pre}.ssm.b_learn"))?,
                    ts.matrix(&format!("{pre}.ssm.c"))?,
                    ts.vector(&format!("{pre}.ssm.d"))?,
                )
                .map_err(core)?,
            ),
            TAG_DENSE | TAG_DIAGONAL => {
                let truncated_tail = ts.scalar(&format!("{pre}.ssm.truncated_tail"))?;
                let system = if tag == TAG_DENSE {
                    ReducedSystem::DenseReal(
                        DenseSsm::new(
                            ts.matrix(&format!("{pre}.ssm.a"))?,
                            ts.matrix(&format!("{pre}.ssm.b"))?,
                            ts.matrix(&format!("{pre}.ssm.c"))?,
                            ts.matrix(&format!("{pre}.ssm.d"))?,
                        )
                        .map_err(core)?,
                    )
                } else {
                    let re = ts.vector(&format!("{pre}.ssm.lambda_re"))?;
                    let im = ts.vector(&format!("{pre}.ssm.lambda_im"))?;
                    if re.len() != im.len() {
                        return Err(CliError::Data(format!("{pre}: eigenvalue parts differ in length")));
                    }
                    let complex = |a: DMatrix<f64>, b: DMatrix<f64>| -> Result<DMatrix<Complex64>, CliError> {
                        if a.shape() != b.shape() {
                            return Err(CliError::Data(format!(
                                "{pre}: real and imaginary parts differ in shape"
                            )));
                        }
                        Ok(a.zip_map(&b, Complex64::new))
                    };
                    let b = complex(
                        ts.matrix(&format!("{pre}.ssm.b_re"))?,
                        ts.matrix(&format!("{pre}.ssm.b_im"))?,
                    )?;
                    let c = complex(
                        ts.matrix(&format!("{pre}.ssm.c_re"))?,
                        ts.matrix(&format!("{pre}.ssm.c_im"))?,
                    )?;
                    let d = ts.matrix(&format!("{pre}.ssm.d"))?;
                    if b.nrows() != re.len() || c.ncols() != re.len() || d.shape() != (c.nrows(), b.ncols()) {
                        return Err(CliError::Data(format!("{pre}: modal system shapes are inconsistent")));
                    }
                    ReducedSystem::DiagonalComplex(DiagonalSsm {
                        lambda: re.iter().zip(&im).map(|(&a, &b)| Complex64::new(a, b)).collect(),
                        b,
                        c,
                        d,
                    })
                };
                let mut reduced = ReducedSsm {
                    system,
                    r: 0,
                    truncated_tail,
                };
                reduced.r = match &reduced.system {
                    ReducedSystem::DenseReal(s) => s.n(),
                    ReducedSystem::DiagonalComplex(s) => s.order(),
                };
                SsmLayer::Reduced(reduced)
            }
            t => return Err(CliError::Data(format!("{pre}: unknown layer mode tag {t}"))),
        };
        let gate = ts.matrix(&format!("{pre}.gate"))?;
        blocks.push(Block { norm, ssm, gate });
    }
    let decoder_w = ts.matrix("decoder.w")?;
    let decoder_b = DVector::from_vec(ts.vector("decoder.b")?);
    let model = SequenceModel {
        config,
        encoder_w,
        encoder_b,
        blocks,
        decoder_w,
        decoder_b,
    };
    validate_shapes(&model)?;
    Ok(model)
}

fn validate_shapes(m: &SequenceModel) -> Result<(), CliError> {
    let p = m.encoder_w.nrows();
    let bad = |what: &str| Err(CliError::Data(format!("checkpoint: {what} has inconsistent shape")));
    if m.encoder_b.len() != p || m.decoder_w.ncols() != p || m.decoder_b.len() != m.decoder_w.nrows() {
        return bad("encoder/decoder");
    }
    for block in &m.blocks {
        if block.gate.shape() != (p, p) || block.norm.gamma.len() != p || block.norm.beta.len() != p {
            return bad("block");
        }
        let (inputs, outputs) = match &block.ssm {
            SsmLayer::Rotation(s) => (s.p(), s.p()),
            SsmLayer::Reduced(r) => (r.inputs(), r.outputs()),
        };
        if inputs != p || outputs != p {
            return bad("state-space layer");
        }
    }
    Ok(())
}
