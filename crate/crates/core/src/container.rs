//! Named-tensor model file.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic         8 bytes   "DCRF0001"
//! tensor count  u32
//! per tensor:   name length u16, name (UTF-8), rank u8, rank × dim u64,
//!               byte offset u64 into the payload
//! payload size  u64 (bytes)
//! payload       f64 values, row-major, tensors back to back in manifest order
//! meta size     u32 (bytes)
//! metadata      UTF-8 lines `key = value`
//! ```
//!
//! Tensors must tile the payload in manifest order, so a load/save cycle
//! reproduces the file byte for byte.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use crate::crf::CrfParams;
use crate::data::LabelAlphabet;
use crate::encoder::{EncoderStack, Layer};
use crate::error::{Error, Result};
use crate::math::Matrix;
use crate::trainer::{join_sizes, DeepCrfModel, ModelMeta};

pub const MAGIC: &[u8; 8] = b"DCRF0001";

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<u64>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let size: u64 = dims.iter().product();
        if size != data.len() as u64 {
            return Err(Error::Container(format!(
                "tensor {name}: dims {dims:?} hold {size} values, got {}",
                data.len()
            )));
        }
        Ok(Self { name, dims, data })
    }

    fn matrix(name: &str, m: &Matrix) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![m.rows() as u64, m.cols() as u64],
            data: m.as_slice().to_vec(),
        }
    }

    fn vector(name: &str, v: &[f64]) -> Self {
        Self {
            name: name.to_string(),
            dims: vec![v.len() as u64],
            data: v.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelContainer {
    pub tensors: Vec<NamedTensor>,
    pub metadata: Vec<(String, String)>,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Container(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl ModelContainer {
    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    fn require_meta(&self, key: &str) -> Result<&str> {
        self.meta(key)
            .ok_or_else(|| Error::Container(format!("missing metadata key {key}")))
    }

    fn require(&self, name: &str, dims: &[u64]) -> Result<&NamedTensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Container(format!("missing tensor {name}")))?;
        if t.dims != dims {
            return Err(Error::Container(format!(
                "tensor {name}: expected dims {dims:?}, found {:?}",
                t.dims
            )));
        }
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Container(format!("tensor name too long: {}", t.name)))?;
            let rank = u8::try_from(t.dims.len())
                .map_err(|_| Error::Container(format!("tensor {} rank too large", t.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(rank);
            for d in &t.dims {
                out.extend_from_slice(&d.to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.data.len() as u64;
        }
        out.extend_from_slice(&offset.to_le_bytes());
        for t in &self.tensors {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut meta = String::new();
        for (k, v) in &self.metadata {
            if k.contains(['\n', '=']) || v.contains('\n') {
                return Err(Error::Container(format!("metadata entry {k:?} not representable")));
            }
            meta += &format!("{k} = {v}\n");
        }
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(8)? != MAGIC {
            return Err(Error::Container("unknown magic tag".into()));
        }
        let n = c.u32()? as usize;
        let mut manifest = Vec::with_capacity(n.min(1024));
        let mut expected_offset = 0u64;
        for _ in 0..n {
            let len = c.u16()? as usize;
            let name = std::str::from_utf8(c.take(len)?)
                .map_err(|_| Error::Container("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = c.u8()? as usize;
            let dims = (0..rank).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
            let offset = c.u64()?;
            if offset != expected_offset {
                return Err(Error::Container(format!(
                    "tensor {name}: offset {offset}, expected {expected_offset}"
                )));
            }
            let bytes = dims
                .iter()
                .try_fold(8u64, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::Container(format!("tensor {name}: size overflow")))?;
            expected_offset = expected_offset
                .checked_add(bytes)
                .ok_or_else(|| Error::Container("payload size overflow".into()))?;
            manifest.push((name, dims, offset, bytes));
        }
        let payload_len = c.u64()?;
        if payload_len != expected_offset {
            return Err(Error::Container(format!(
                "payload is {payload_len} bytes but manifest declares {expected_offset}"
            )));
        }
        let payload_len = usize::try_from(payload_len)
            .map_err(|_| Error::Container("payload too large".into()))?;
        let payload = c.take(payload_len)?;
        let tensors = manifest
            .into_iter()
            .map(|(name, dims, offset, bytes)| {
                let raw = &payload[offset as usize..(offset + bytes) as usize];
                let data = raw
                    .chunks_exact(8)
                    .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                NamedTensor { name, dims, data }
            })
            .collect();
        let meta_len = c.u32()? as usize;
        let meta = std::str::from_utf8(c.take(meta_len)?)
            .map_err(|_| Error::Container("metadata is not UTF-8".into()))?;
        if c.pos != buf.len() {
            return Err(Error::Container(format!(
                "{} trailing bytes",
                buf.len() - c.pos
            )));
        }
        let metadata = meta
            .lines()
            .map(|l| {
                l.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| Error::Container(format!("bad metadata line {l:?}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { tensors, metadata })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    /// Checks the magic tag before reading the rest of the file.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
        if &magic != MAGIC {
            return Err(Error::Container(format!("{}: unknown magic tag", path.display())));
        }
        let mut buf = magic.to_vec();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }

    fn push_encoder(&mut self, enc: &EncoderStack) {
        for (l, layer) in enc.layers().iter().enumerate() {
            self.tensors.push(NamedTensor::matrix(&format!("encoder.{l}.weight"), &layer.weights));
            self.tensors.push(NamedTensor::vector(&format!("encoder.{l}.bias"), &layer.bias));
        }
    }

    fn read_encoder(&self) -> Result<EncoderStack> {
        let d: usize = parse_meta(self.require_meta("d")?, "d")?;
        let sizes = parse_sizes(self.require_meta("layer_sizes")?)?;
        let mut n_in = d;
        let mut layers = Vec::with_capacity(sizes.len());
        for (l, &n_out) in sizes.iter().enumerate() {
            let w = self.require(&format!("encoder.{l}.weight"), &[n_in as u64, n_out as u64])?;
            let b = self.require(&format!("encoder.{l}.bias"), &[n_out as u64])?;
            layers.push(Layer {
                weights: Matrix::from_vec(n_in, n_out, w.data.clone())?,
                bias: b.data.clone(),
            });
            n_in = n_out;
        }
        EncoderStack::new(d, layers)
    }

    /// Encoder-only container from greedy pretraining.
    pub fn from_pretrained(enc: &EncoderStack, extra: &[(String, String)]) -> Self {
        let mut c = ModelContainer::default();
        c.push_encoder(enc);
        c.metadata = vec![
            ("kind".into(), "pretrained".into()),
            ("status".into(), "pretrained, not fine-tuned".into()),
            ("d".into(), enc.input_dim().to_string()),
            ("layer_sizes".into(), join_sizes(&enc.layer_sizes())),
        ];
        c.metadata.extend_from_slice(extra);
        c
    }

    /// The encoder stored in any container (pretrained or fully trained).
    pub fn to_encoder(&self) -> Result<EncoderStack> {
        self.read_encoder()
    }

    pub fn from_model(model: &DeepCrfModel, extra: &[(String, String)]) -> Self {
        let mut c = ModelContainer::default();
        c.push_encoder(&model.encoder);
        c.tensors.extend([
            NamedTensor::matrix("crf.transitions", &model.crf.transitions),
            NamedTensor::matrix("crf.emission", &model.crf.emission),
            NamedTensor::vector("crf.bias", &model.crf.bias),
            NamedTensor::vector("crf.start", &model.crf.start),
            NamedTensor::vector("crf.end", &model.crf.end),
        ]);
        c.metadata = vec![
            ("kind".into(), "trained".into()),
            ("alphabet".into(), model.alphabet.to_hex()),
            ("d".into(), model.input_dim().to_string()),
            ("layer_sizes".into(), join_sizes(&model.encoder.layer_sizes())),
            ("config_fingerprint".into(), model.meta.config_fingerprint.clone()),
            ("dataset_fingerprint".into(), model.meta.dataset_fingerprint.clone()),
            ("sweeps_completed".into(), model.meta.sweeps_completed.to_string()),
        ];
        c.metadata.extend_from_slice(extra);
        c
    }

    pub fn to_model(&self) -> Result<DeepCrfModel> {
        if self.meta("kind") != Some("trained") {
            return Err(Error::Container("container does not hold a trained model".into()));
        }
        let encoder = self.read_encoder()?;
        let alphabet = LabelAlphabet::from_hex(self.require_meta("alphabet")?)?;
        let (k, dh) = (alphabet.len() as u64, encoder.output_dim() as u64);
        let mat = |name: &str, r: u64, c: u64| -> Result<Matrix> {
            Matrix::from_vec(r as usize, c as usize, self.require(name, &[r, c])?.data.clone())
        };
        let vec = |name: &str| -> Result<Vec<f64>> { Ok(self.require(name, &[k])?.data.clone()) };
        let crf = CrfParams {
            transitions: mat("crf.transitions", k, k)?,
            emission: mat("crf.emission", dh, k)?,
            bias: vec("crf.bias")?,
            start: vec("crf.start")?,
            end: vec("crf.end")?,
        };
        let meta = ModelMeta {
            config_fingerprint: self.meta("config_fingerprint").unwrap_or_default().to_string(),
            dataset_fingerprint: self.meta("dataset_fingerprint").unwrap_or_default().to_string(),
            sweeps_completed: parse_meta(self.meta("sweeps_completed").unwrap_or("0"), "sweeps_completed")?,
        };
        DeepCrfModel::new(encoder, crf, alphabet, meta)
    }
}

fn parse_meta<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Container(format!("bad value {v:?} for {key}")))
}

pub(crate) fn parse_sizes(s: &str) -> Result<Vec<usize>> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Invalid(format!("bad layer size {t:?}")))
        })
        .collect()
}
