//! The "LCSS" checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "LCSS" | u32 version | u32 metadata length | metadata (UTF-8)
//! repeated until end of file:
//!   u16 name length | name (UTF-8) | u8 rank | rank × u32 dims | f32 payload
//! ```
//!
//! Subspace tensors are stored under their qualified names (`w/`, `w1/`,
//! `w2/`); BatchNorm running statistics under `state/<layer>.running_mean`
//! and `state/<layer>.running_var`. GroupNorm models carry no state records.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use thiserror::Error;

use crate::nn::{Model, NamedTensors, ParamSet, Parameter};
use crate::subspace::{Subspace, SubspaceError, SubspaceKind, END1, END2, SHARED};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LCSS";
pub const VERSION: u32 = 1;
pub const MAX_RANK: usize = 8;
pub const STATE: &str = "state/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not fit the model: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Subspace(#[from] SubspaceError),
}

fn format_err<T>(msg: impl Into<String>) -> Result<T, CheckpointError> {
    Err(CheckpointError::Format(msg.into()))
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Free-form UTF-8 text; the CLI stores the run configuration here.
    pub metadata: String,
    pub tensors: NamedTensors,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => format_err(format!(
                "truncated {what} at byte {}: need {n}, have {}",
                self.pos,
                self.bytes.len() - self.pos
            )),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>, CheckpointError> {
        let meta_len = u32::try_from(self.metadata.len())
            .or_else(|_| format_err("metadata longer than 4 GiB"))?;
        let payload: usize = self.tensors.values().map(|t| t.len() * 4).sum();
        let mut out = Vec::with_capacity(12 + self.metadata.len() + payload + 64 * self.tensors.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&meta_len.to_le_bytes());
        out.extend_from_slice(self.metadata.as_bytes());
        for (name, t) in &self.tensors {
            let name_len =
                u16::try_from(name.len()).or_else(|_| format_err(format!("tensor name too long: {name:.40}…")))?;
            if t.rank() > MAX_RANK {
                return format_err(format!("{name}: rank {} exceeds {MAX_RANK}", t.rank()));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                let d = u32::try_from(d).or_else(|_| format_err(format!("{name}: dimension {d} exceeds u32")))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return format_err("bad magic (not an LCSS checkpoint)");
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return format_err(format!("unsupported version {version} (reader understands {VERSION})"));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let metadata = std::str::from_utf8(r.take(meta_len, "metadata")?)
            .or_else(|e| format_err(format!("metadata is not UTF-8: {e}")))?
            .to_owned();
        let mut tensors = IndexMap::new();
        while !r.done() {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
                .or_else(|e| format_err(format!("tensor name is not UTF-8: {e}")))?
                .to_owned();
            if name.is_empty() {
                return format_err("empty tensor name");
            }
            if tensors.contains_key(&name) {
                return format_err(format!("duplicate tensor {name}"));
            }
            let rank = r.u8("rank")? as usize;
            if rank == 0 || rank > MAX_RANK {
                return format_err(format!("{name}: rank {rank} outside 1..={MAX_RANK}"));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = r.u32("dimension")? as usize;
                if d == 0 {
                    return format_err(format!("{name}: zero dimension"));
                }
                shape.push(d);
            }
            let bytes_needed = shape
                .iter()
                .try_fold(4usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| CheckpointError::Format(format!("{name}: shape {shape:?} overflows")))?;
            let raw = r.take(bytes_needed, "tensor payload")?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if data.iter().any(|v| !v.is_finite()) {
                return format_err(format!("{name}: non-finite value"));
            }
            let t = Tensor::new(shape, data).or_else(|e| format_err(format!("{name}: {e}")))?;
            tensors.insert(name, t);
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|source| CheckpointError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// Snapshot of a subspace plus the model's BatchNorm running statistics.
    pub fn from_run(model: &Model, subspace: &Subspace, metadata: String) -> Self {
        let mut tensors: NamedTensors = subspace
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        for (layer, state) in model.bn_states() {
            tensors.insert(format!("{STATE}{layer}.running_mean"), state.running_mean.clone());
            tensors.insert(format!("{STATE}{layer}.running_var"), state.running_var.clone());
        }
        Self { metadata, tensors }
    }

    /// Rebuilds the subspace and loads running statistics into `model`. Every
    /// record must be consumed; leftovers are reported as a mismatch.
    pub fn restore(&self, model: &mut Model, kind: SubspaceKind, beta: f64) -> Result<Subspace, CheckpointError> {
        let mut used = 0usize;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor, CheckpointError> {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))?;
            if t.shape() != shape {
                return Err(CheckpointError::Mismatch(format!(
                    "{name}: stored shape {:?}, model expects {shape:?}",
                    t.shape()
                )));
            }
            used += 1;
            Ok(t.clone())
        };
        let mut params = ParamSet::default();
        for spec in model.param_specs() {
            let prefixes: &[&str] = if kind.is_line(spec.kind) { &[END1, END2] } else { &[SHARED] };
            for prefix in prefixes {
                let q = format!("{prefix}{}", spec.name);
                let t = take(&q, &spec.shape)?;
                params.insert(Parameter::new(q, spec.kind, t));
            }
        }
        let layers: Vec<(String, usize)> = model
            .bn_states()
            .iter()
            .map(|(l, s)| (l.clone(), s.running_mean.len()))
            .collect();
        let mut states = Vec::new();
        for (layer, c) in &layers {
            let mean = take(&format!("{STATE}{layer}.running_mean"), &[*c])?;
            let var = take(&format!("{STATE}{layer}.running_var"), &[*c])?;
            if var.data().iter().any(|&v| v < 0.0) {
                return Err(CheckpointError::Mismatch(format!("{layer}: negative running variance")));
            }
            states.push((layer.clone(), mean, var));
        }
        if used != self.tensors.len() {
            let extra: Vec<&String> = self
                .tensors
                .keys()
                .filter(|k| {
                    !params.iter().any(|p| &p.name == *k)
                        && !layers.iter().any(|(l, _)| k.starts_with(&format!("{STATE}{l}.")))
                })
                .collect();
            return Err(CheckpointError::Mismatch(format!("unexpected tensors {extra:?}")));
        }
        for (layer, mean, var) in states {
            let s = model.bn_states_mut().get_mut(&layer).expect("layer listed above");
            s.running_mean = mean;
            s.running_var = var;
        }
        Ok(Subspace::from_parts(model, kind, params, beta)?)
    }
}
