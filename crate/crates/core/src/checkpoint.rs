//! Binary checkpoint format.
//!
//! A file starts with the magic bytes `PYML1` and a newline, followed by one
//! line of JSON (model config, alphabet, vocabulary, tensor manifest and
//! training state), then the tensor values as little-endian `f32` in
//! manifest order. Optimizer moments, when present, are stored as ordinary
//! tensors named `adam.first.<param>` and `adam.second.<param>` after the
//! parameters.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::model::{LmConfig, ModelConfig, Parameters};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::vocab::{CharAlphabet, WordVocab};

pub const MAGIC: &[u8; 5] = b"PYML1";

/// Which architecture a checkpoint holds, with its configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    Seq2seq(ModelConfig),
    Lm(LmConfig),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct AdamHeader {
    config: AdamConfig,
    step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model: ModelSpec,
    alphabet: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab: Option<String>,
    tensors: Vec<TensorEntry>,
    step: u64,
    rng: RngState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adam: Option<AdamHeader>,
    #[serde(default)]
    meta: BTreeMap<String, serde_json::Value>,
}

/// Everything needed to resume training or serve a model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub alphabet: CharAlphabet,
    pub vocab: Option<WordVocab>,
    pub params: Parameters<f32>,
    pub step: u64,
    pub rng: RngState,
    pub adam: Option<AdamState<f32>>,
    /// Free-form training metadata (training config, validation scores).
    pub meta: BTreeMap<String, serde_json::Value>,
}

impl Checkpoint {
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.params.names().iter().cloned().zip(self.params.tensors()).collect();
        if let Some(adam) = &self.adam {
            if adam.first.len() != self.params.len() || adam.second.len() != self.params.len() {
                return Err(Error::Format("optimizer state does not match parameters".into()));
            }
            for (kind, moments) in [("first", &adam.first), ("second", &adam.second)] {
                for (name, t) in self.params.names().iter().zip(moments) {
                    tensors.push((format!("adam.{kind}.{name}"), t));
                }
            }
        }
        let header = Header {
            model: self.model.clone(),
            alphabet: self.alphabet.symbols().iter().map(|&c| c as u32).collect(),
            vocab: self.vocab.as_ref().map(|v| v.to_tsv()),
            tensors: tensors
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            step: self.step,
            rng: self.rng,
            adam: self.adam.as_ref().map(|a| AdamHeader {
                config: a.config,
                step: a.step,
            }),
            meta: self.meta.clone(),
        };
        let io = |e| Error::io("<checkpoint>", e);
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        let mut buf = Vec::new();
        for (_, t) in &tensors {
            buf.clear();
            buf.reserve(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut r = BufReader::new(r);
        let io = |e| Error::io("<checkpoint>", e);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("truncated checkpoint".into()))?;
        if &magic[..5] != MAGIC || magic[5] != b'\n' {
            return Err(Error::Format("not a checkpoint (bad magic bytes)".into()));
        }
        let mut line = String::new();
        r.read_line(&mut line).map_err(io)?;
        let header: Header = serde_json::from_str(line.trim_end())?;

        let symbols = header
            .alphabet
            .iter()
            .map(|&u| char::from_u32(u).ok_or_else(|| Error::Format(format!("invalid codepoint {u}"))))
            .collect::<Result<Vec<_>>>()?;
        let alphabet = CharAlphabet::from_symbols(symbols)?;
        let vocab = header.vocab.as_deref().map(WordVocab::from_tsv).transpose()?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut bytes = Vec::new();
        for entry in &header.tensors {
            let n: usize = entry.shape.iter().product();
            bytes.resize(n * 4, 0);
            r.read_exact(&mut bytes)
                .map_err(|_| Error::Format(format!("checkpoint truncated in tensor {}", entry.name)))?;
            let data = bytes
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint tensors".into()));
        }

        let mut params = Vec::new();
        let mut first = BTreeMap::new();
        let mut second = BTreeMap::new();
        for (name, t) in tensors {
            if let Some(p) = name.strip_prefix("adam.first.") {
                first.insert(p.to_string(), t);
            } else if let Some(p) = name.strip_prefix("adam.second.") {
                second.insert(p.to_string(), t);
            } else {
                params.push((name, t));
            }
        }
        let params = Parameters::from_tensors(params)?;
        let expected = match &header.model {
            ModelSpec::Seq2seq(c) => c.manifest(),
            ModelSpec::Lm(c) => c.manifest(),
        };
        params.check_manifest(&expected)?;
        let adam = match header.adam {
            Some(h) => {
                let take = |m: &mut BTreeMap<String, Tensor<f32>>, name: &str| {
                    m.remove(name)
                        .ok_or_else(|| Error::Format(format!("missing optimizer moment for {name}")))
                };
                let mut f = Vec::with_capacity(params.len());
                let mut s = Vec::with_capacity(params.len());
                for name in params.names() {
                    f.push(take(&mut first, name)?);
                    s.push(take(&mut second, name)?);
                }
                Some(AdamState {
                    config: h.config,
                    step: h.step,
                    first: f,
                    second: s,
                })
            }
            None => None,
        };
        if !first.is_empty() || !second.is_empty() {
            return Err(Error::Format("optimizer moments for unknown parameters".into()));
        }
        Ok(Self {
            model: header.model,
            alphabet,
            vocab,
            params,
            step: header.step,
            rng: header.rng,
            adam,
            meta: header.meta,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_to(&mut out)?;
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::read_from(bytes)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        self.write_to(std::io::BufWriter::new(file))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        Self::read_from(file)
    }
}
