//! Self-describing model files.
//!
//! Layout: the 8-byte magic `NMTKIT\0\x01`, a little-endian `u64` header
//! length, a JSON header, then every array as raw little-endian values of
//! the header's `dtype`, in manifest order. Offsets are in bytes from the
//! start of the array block.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamKind, ParamStore};
use crate::config::ExperimentConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::init::RngState;
use crate::model::{Model, ModelOptions, ModelType};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"NMTKIT\0\x01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    /// `None` for non-parameter arrays such as optimizer slots.
    pub kind: Option<ParamKind>,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: String,
    /// `None` for a bare weight archive.
    pub model_type: Option<ModelType>,
    pub options: Option<ModelOptions>,
    pub config: Option<ExperimentConfig>,
    pub src_vocab: Option<Vec<String>>,
    pub trg_vocab: Option<Vec<String>>,
    pub arrays: Vec<ArrayEntry>,
    /// Resumable training state, present in snapshots.
    pub state: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: Header,
    pub arrays: Vec<Tensor<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    /// Parameters of `model`, followed by `extras` (name, tensor).
    pub fn from_model(
        model: &Model<T>,
        config: Option<&ExperimentConfig>,
        vocabs: (Option<&Vocabulary>, Option<&Vocabulary>),
        extras: Vec<(String, Tensor<T>)>,
        state: Option<serde_json::Value>,
    ) -> Self {
        let mut named: Vec<(String, Option<ParamKind>, Tensor<T>)> = model
            .store()
            .iter()
            .map(|(_, p)| (p.name.clone(), Some(p.kind), p.value.clone()))
            .collect();
        named.extend(extras.into_iter().map(|(n, t)| (n, None, t)));
        let mut ckpt = Self::from_arrays(named, state);
        ckpt.header.model_type = Some(model.kind());
        ckpt.header.options = Some(model.options().clone());
        ckpt.header.config = config.cloned();
        ckpt.header.src_vocab = vocabs.0.map(|v| v.tokens().to_vec());
        ckpt.header.trg_vocab = vocabs.1.map(|v| v.tokens().to_vec());
        ckpt
    }

    pub fn from_arrays(named: Vec<(String, Option<ParamKind>, Tensor<T>)>, state: Option<serde_json::Value>) -> Self {
        let mut offset = 0u64;
        let mut entries = Vec::with_capacity(named.len());
        let mut arrays = Vec::with_capacity(named.len());
        for (name, kind, t) in named {
            entries.push(ArrayEntry {
                name,
                kind,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += (t.len() * T::BYTES) as u64;
            arrays.push(t);
        }
        Self {
            header: Header {
                dtype: T::DTYPE.into(),
                model_type: None,
                options: None,
                config: None,
                src_vocab: None,
                trg_vocab: None,
                arrays: entries,
                state,
            },
            arrays,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.header
            .arrays
            .iter()
            .position(|e| e.name == name)
            .map(|i| &self.arrays[i])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.arrays.iter().map(|a| a.len() * T::BYTES).sum();
        let mut out = Vec::with_capacity(16 + header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for a in &self.arrays {
            for &v in a.data() {
                v.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Values stored as f32 or f64 are converted to `T` on load.
    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(format!("{origin}: {msg}"));
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a model file"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[16 + hlen..];
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            other => return Err(bad(&format!("unknown dtype {other:?}"))),
        };
        let mut arrays = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let chunk = data
                .get(start..start + n * width)
                .ok_or_else(|| bad(&format!("array {} runs past end of file", e.name)))?;
            let values: Vec<T> = chunk
                .chunks_exact(width)
                .map(|c| {
                    if width == 4 {
                        T::from_f64_lossy(f32::read_le(c) as f64)
                    } else {
                        T::from_f64_lossy(f64::read_le(c))
                    }
                })
                .collect();
            arrays.push(Tensor::new(e.shape.clone(), values)?);
        }
        Ok(Self { header, arrays })
    }

    /// Writes through a temporary file so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Rebuilds the model; the stored parameter names must match the
    /// architecture's exactly.
    pub fn to_model(&self) -> Result<Model<T>> {
        let (Some(kind), Some(opts)) = (self.header.model_type, self.header.options.clone()) else {
            return Err(Error::Checkpoint("file holds bare weights, not a model".into()));
        };
        let mut model = Model::init(kind, opts, &mut RngState::from_seed(0))?;
        let stored: HashMap<&str, usize> = self
            .header
            .arrays
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind.is_some())
            .map(|(i, e)| (e.name.as_str(), i))
            .collect();
        let expected: BTreeSet<&str> = model.store().names().collect();
        let have: BTreeSet<&str> = stored.keys().copied().collect();
        if expected != have {
            let missing: Vec<_> = expected.difference(&have).collect();
            let extra: Vec<_> = have.difference(&expected).collect();
            return Err(Error::Checkpoint(format!(
                "parameter mismatch; missing {missing:?}, unexpected {extra:?}"
            )));
        }
        let names: Vec<String> = model.store().names().map(str::to_owned).collect();
        assign(model.store_mut(), &names, |n| Some(&self.arrays[stored[n]]), true)?;
        Ok(model)
    }

    pub fn vocabularies(&self) -> Result<(Option<Vocabulary>, Option<Vocabulary>)> {
        let conv = |v: &Option<Vec<String>>| v.clone().map(Vocabulary::from_tokens).transpose();
        Ok((conv(&self.header.src_vocab)?, conv(&self.header.trg_vocab)?))
    }

    /// Extra arrays whose names start with `prefix`, keyed by full name.
    pub fn extras(&self, prefix: &str) -> HashMap<String, Tensor<T>> {
        self.header
            .arrays
            .iter()
            .zip(&self.arrays)
            .filter(|(e, _)| e.kind.is_none() && e.name.starts_with(prefix))
            .map(|(e, a)| (e.name.clone(), a.clone()))
            .collect()
    }
}

/// Copies arrays into parameters by name, checking shapes. With `all`,
/// every listed name must be provided.
fn assign<'a, T: Scalar>(
    store: &mut ParamStore<T>,
    names: &[String],
    source: impl Fn(&str) -> Option<&'a Tensor<T>>,
    all: bool,
) -> Result<usize> {
    let mut n = 0;
    for name in names {
        let id = store.id(name).expect("name from store");
        match source(name) {
            Some(t) => {
                let p = store.get_mut(id);
                if p.value.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!(
                        "{name}: stored shape {:?} differs from model shape {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t.clone();
                n += 1;
            }
            None if all => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            None => {}
        }
    }
    Ok(n)
}

/// Shell-style match supporting `*` and `?`; a pattern without wildcards
/// matches any name containing it.
pub fn name_matches(pattern: &str, name: &str) -> bool {
    if !pattern.contains(['*', '?']) {
        return name.contains(pattern);
    }
    fn rec(p: &[char], s: &[char]) -> bool {
        match (p.first(), s.first()) {
            (None, None) => true,
            (Some('*'), _) => rec(&p[1..], s) || (!s.is_empty() && rec(p, &s[1..])),
            (Some('?'), Some(_)) => rec(&p[1..], &s[1..]),
            (Some(a), Some(b)) if a == b => rec(&p[1..], &s[1..]),
            _ => false,
        }
    }
    let p: Vec<char> = pattern.chars().collect();
    let s: Vec<char> = name.chars().collect();
    rec(&p, &s)
}

/// Parameter arrays of `ckpt` matching any pattern, as a bare archive.
pub fn extract_weights<T: Scalar>(ckpt: &Checkpoint<T>, patterns: &[String]) -> Result<Checkpoint<T>> {
    let picked: Vec<(String, Option<ParamKind>, Tensor<T>)> = ckpt
        .header
        .arrays
        .iter()
        .zip(&ckpt.arrays)
        .filter(|(e, _)| e.kind.is_some() && patterns.iter().any(|p| name_matches(p, &e.name)))
        .map(|(e, a)| (e.name.clone(), e.kind, a.clone()))
        .collect();
    if picked.is_empty() {
        return Err(Error::Checkpoint(format!("no parameter matches {patterns:?}")));
    }
    Ok(Checkpoint::from_arrays(picked, None))
}

/// Overwrites parameters that appear in `archive`; returns how many were
/// taken. Names unknown to the model are an error.
pub fn load_pretrained<T: Scalar>(store: &mut ParamStore<T>, archive: &Checkpoint<T>) -> Result<usize> {
    let index: HashMap<&str, &Tensor<T>> = archive
        .header
        .arrays
        .iter()
        .zip(&archive.arrays)
        .map(|(e, a)| (e.name.as_str(), a))
        .collect();
    if let Some(unknown) = index.keys().find(|n| store.id(n).is_none()) {
        return Err(Error::Checkpoint(format!("pre-trained array {unknown} has no matching parameter")));
    }
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    assign(store, &names, |n| index.get(n).copied(), false)
}
