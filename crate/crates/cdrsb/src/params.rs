//! Flat parameter store: every learnable tensor in the model lives here under a
//! stable name, so the optimizer, checkpointing, and finite-difference checks
//! can treat the whole model as one vector of scalars. Non-trainable state
//! (batch-norm running statistics) shares the store but is skipped by the
//! optimizer and by gradient enumeration.

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};

#[derive(Clone, Copy, PartialEq, Eq, Debug, Hash)]
pub struct ParamId(pub u32);

#[derive(Clone, Debug)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Clone, Debug)]
pub struct ParameterStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    trainable: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        ParameterStore {
            names: Vec::new(),
            tensors: Vec::new(),
            trainable: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, rows: usize, cols: usize, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate tensor name {name}"
        );
        let id = ParamId(self.tensors.len() as u32);
        self.names.push(name.to_string());
        self.tensors.push(Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        });
        self.trainable.push(trainable);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0 as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0 as usize]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0 as usize]
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0 as usize]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len() as u32).map(ParamId)
    }

    /// Zero-mean uniform init scaled by 1/sqrt(fan_in); fan_in is the column
    /// count (input width for a row-major weight applied as y = W x).
    pub fn init_uniform(&mut self, id: ParamId, rng: &mut ChaCha8Rng) {
        let t = self.get_mut(id);
        let bound = 1.0 / (t.cols as f64).sqrt();
        for v in t.data.iter_mut() {
            *v = rng.gen_range(-bound..bound);
        }
    }

    pub fn fill(&mut self, id: ParamId, value: f64) {
        for v in self.get_mut(id).data.iter_mut() {
            *v = value;
        }
    }

    /// Total scalar count over trainable tensors (finite-difference domain).
    pub fn num_trainable_scalars(&self) -> usize {
        self.tensors
            .iter()
            .zip(&self.trainable)
            .filter(|(_, t)| **t)
            .map(|(t, _)| t.len())
            .sum()
    }

    /// Map a flat trainable-scalar index to (tensor, offset).
    pub fn locate_trainable(&self, mut idx: usize) -> (ParamId, usize) {
        for (i, t) in self.tensors.iter().enumerate() {
            if !self.trainable[i] {
                continue;
            }
            if idx < t.len() {
                return (ParamId(i as u32), idx);
            }
            idx -= t.len();
        }
        panic!("trainable scalar index out of range");
    }

    pub fn nudge(&mut self, id: ParamId, offset: usize, delta: f64) {
        self.tensors[id.0 as usize].data[offset] += delta;
    }
}

impl Default for ParameterStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-tensor gradient buffers aligned with a store's layout.
#[derive(Clone, Debug)]
pub struct Grads {
    pub data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Grads {
            data: store.ids().map(|id| vec![0.0; store.get(id).len()]).collect(),
        }
    }

    pub fn reset(&mut self) {
        for g in self.data.iter_mut() {
            for v in g.iter_mut() {
                *v = 0.0;
            }
        }
    }

    pub fn of(&self, id: ParamId) -> &[f64] {
        &self.data[id.0 as usize]
    }

    pub fn of_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0 as usize]
    }
}

/// RMS-style adaptive optimizer: per-scalar squared-gradient moving average,
/// update = lr * g / (sqrt(avg) + eps). Non-trainable tensors are untouched.
pub struct RmsProp {
    sq: Vec<Vec<f64>>,
    pub decay: f64,
    pub eps: f64,
}

impl RmsProp {
    pub fn new(store: &ParameterStore, decay: f64, eps: f64) -> Self {
        RmsProp {
            sq: store.ids().map(|id| vec![0.0; store.get(id).len()]).collect(),
            decay,
            eps,
        }
    }

    pub fn step(&mut self, store: &mut ParameterStore, grads: &Grads, lr: f64) {
        for id in 0..store.len() {
            if !store.trainable[id] {
                continue;
            }
            let sq = &mut self.sq[id];
            let g = &grads.data[id];
            let t = &mut store.tensors[id];
            for k in 0..t.data.len() {
                sq[k] = self.decay * sq[k] + (1.0 - self.decay) * g[k] * g[k];
                t.data[k] -= lr * g[k] / (sq[k].sqrt() + self.eps);
            }
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 6] = b"CDRB1\n";

/// Write the full store plus a config JSON blob as one binary file.
/// Layout: magic, u32 config length, config bytes, u32 tensor count, then per
/// tensor: u32 name length, name, u32 rows, u32 cols, u8 trainable, f64 LE data.
pub fn save_checkpoint(store: &ParameterStore, config_json: &str, path: &str) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let cfg = config_json.as_bytes();
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg);
    buf.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id).as_bytes();
        let t = store.get(id);
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
        buf.push(store.is_trainable(id) as u8);
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &str) -> Result<(ParameterStore, String)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Checkpoint(format!("{path}: truncated file")));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    let magic = take(&mut pos, 6)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!("{path}: bad magic")));
    }
    let read_u32 = |pos: &mut usize| -> Result<u32> {
        let b = take(pos, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let cfg_len = read_u32(&mut pos)? as usize;
    let cfg = String::from_utf8(take(&mut pos, cfg_len)?.to_vec())
        .map_err(|_| Error::Checkpoint(format!("{path}: config is not utf-8")))?;
    let count = read_u32(&mut pos)? as usize;
    let mut store = ParameterStore::new();
    for _ in 0..count {
        let name_len = read_u32(&mut pos)? as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{path}: tensor name is not utf-8")))?;
        let rows = read_u32(&mut pos)? as usize;
        let cols = read_u32(&mut pos)? as usize;
        let trainable = take(&mut pos, 1)?[0] != 0;
        let id = store.add(&name, rows, cols, trainable);
        let data = take(&mut pos, rows * cols * 8)?;
        let dst = &mut store.get_mut(id).data;
        for (k, chunk) in data.chunks_exact(8).enumerate() {
            dst[k] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    Ok((store, cfg))
}
