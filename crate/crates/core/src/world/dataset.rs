//! Sequence batches and their on-disk format.
//!
//! ```text
//! offset  size        content
//! 0       8           magic b"SSMDATA1"
//! 8       8           header length H, u64 little-endian
//! 16      H           UTF-8 JSON header
//! 16+H    8·N·T·K     x, f64 little-endian, [N][T][K]
//!         8·N·(T+L)·K z_true (only if has_truth)
//!         8·N·T·K     s_true (only if has_truth)
//!         8·N         environment index per sequence, u64 little-endian
//! ```
//!
//! Header keys: `magic`, `version`, `k`, `markov_order`, `t0`, `t_dyn`,
//! `t_future`, `n`, `envs`, `env_counts`, `seed`, `has_truth`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"SSMDATA1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub k: usize,
    pub markov_order: usize,
    pub t0: usize,
    pub t_dyn: usize,
    pub t_future: usize,
    /// Number of environments of the generating world.
    pub envs_total: usize,
    pub seed: u64,
    /// `[N × T × K]`.
    pub x: Tensor,
    pub env: Vec<usize>,
    /// `[N × (T + L) × K]`; the first `L` states precede the first frame.
    pub z_true: Option<Tensor>,
    /// `[N × T × K]`; `s_true[t]` drives the transition into frame `t`.
    pub s_true: Option<Tensor>,
}

impl SequenceBatch {
    pub fn len(&self) -> usize {
        self.env.len()
    }

    pub fn is_empty(&self) -> bool {
        self.env.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.t0 + self.t_dyn + self.t_future
    }

    /// Frames used for training: `t0 + t_dyn`.
    pub fn t_train(&self) -> usize {
        self.t0 + self.t_dyn
    }

    pub fn has_truth(&self) -> bool {
        self.z_true.is_some() && self.s_true.is_some()
    }

    pub fn env_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.envs_total];
        for &e in &self.env {
            c[e] += 1;
        }
        c
    }

    /// Observation `x[i, t, :]`.
    pub fn frame(&self, i: usize, t: usize) -> &[f64] {
        let (tt, k) = (self.seq_len(), self.k);
        &self.x.data()[(i * tt + t) * k..(i * tt + t + 1) * k]
    }

    /// True latent state of frame `t` (0-based).
    pub fn z_frame(&self, i: usize, t: usize) -> Option<&[f64]> {
        let (tt, k, l) = (self.seq_len(), self.k, self.markov_order);
        self.z_true
            .as_ref()
            .map(|z| &z.data()[(i * (tt + l) + l + t) * k..(i * (tt + l) + l + t + 1) * k])
    }

    /// The `L` true states preceding frame `t`, oldest first.
    pub fn z_history(&self, i: usize, t: usize) -> Option<&[f64]> {
        let (tt, k, l) = (self.seq_len(), self.k, self.markov_order);
        self.z_true
            .as_ref()
            .map(|z| &z.data()[(i * (tt + l) + t) * k..(i * (tt + l) + t + l) * k])
    }

    /// True noise that produced frame `t`.
    pub fn s_frame(&self, i: usize, t: usize) -> Option<&[f64]> {
        let (tt, k) = (self.seq_len(), self.k);
        self.s_true
            .as_ref()
            .map(|s| &s.data()[(i * tt + t) * k..(i * tt + t + 1) * k])
    }

    /// Sequences at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> SequenceBatch {
        let pick = |t: &Tensor| {
            let per: usize = t.shape()[1..].iter().product();
            let mut data = Vec::with_capacity(indices.len() * per);
            for &i in indices {
                data.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
            let mut shape = t.shape().to_vec();
            shape[0] = indices.len();
            Tensor::new(shape, data).expect("selection preserves finiteness")
        };
        SequenceBatch {
            x: pick(&self.x),
            env: indices.iter().map(|&i| self.env[i]).collect(),
            z_true: self.z_true.as_ref().map(pick),
            s_true: self.s_true.as_ref().map(pick),
            ..self.clone_header()
        }
    }

    /// The first `n` sequences of every environment.
    pub fn take_per_env(&self, n: usize) -> SequenceBatch {
        let mut seen = vec![0; self.envs_total];
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| {
                let e = self.env[i];
                seen[e] += 1;
                seen[e] <= n
            })
            .collect();
        self.select(&idx)
    }

    fn clone_header(&self) -> SequenceBatch {
        SequenceBatch {
            k: self.k,
            markov_order: self.markov_order,
            t0: self.t0,
            t_dyn: self.t_dyn,
            t_future: self.t_future,
            envs_total: self.envs_total,
            seed: self.seed,
            x: Tensor::zeros(vec![0, self.seq_len(), self.k]),
            env: vec![],
            z_true: None,
            s_true: None,
        }
    }

    /// Copy with observations replaced.
    pub fn with_x(&self, x: Tensor) -> SequenceBatch {
        assert_eq!(x.shape(), self.x.shape());
        SequenceBatch { x, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let (n, t, k, l) = (self.len(), self.seq_len(), self.k, self.markov_order);
        let ok = self.x.shape() == [n, t, k]
            && self.z_true.as_ref().map_or(true, |z| z.shape() == [n, t + l, k])
            && self.s_true.as_ref().map_or(true, |s| s.shape() == [n, t, k])
            && self.env.iter().all(|&e| e < self.envs_total);
        if ok {
            Ok(())
        } else {
            Err(Error::shape("sequence_batch", "arrays disagree with the declared extents"))
        }
    }
}

/// Per-dimension affine standardization of observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(k: usize) -> Self {
        Standardizer {
            mean: vec![0.0; k],
            std: vec![1.0; k],
        }
    }

    /// Statistics over every frame of every sequence.
    pub fn fit(batch: &SequenceBatch) -> Result<Self> {
        let k = batch.k;
        let data = batch.x.data();
        let m = data.len() / k;
        if m < 2 {
            return Err(Error::domain("standardizer", "need at least two frames"));
        }
        let mut mean = vec![0.0; k];
        for row in data.chunks(k) {
            for (a, v) in mean.iter_mut().zip(row) {
                *a += v;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m as f64);
        let mut var = vec![0.0; k];
        for row in data.chunks(k) {
            for j in 0..k {
                var[j] += (row[j] - mean[j]).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / (m - 1) as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn apply(&self, batch: &SequenceBatch) -> SequenceBatch {
        let k = batch.k;
        let x: Vec<f64> = batch
            .x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % k]) / self.std[i % k])
            .collect();
        batch.with_x(Tensor::new(batch.x.shape().to_vec(), x).expect("finite"))
    }

    pub fn transform_row(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .enumerate()
            .map(|(j, v)| (v - self.mean[j]) / self.std[j])
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    magic: String,
    version: u32,
    k: usize,
    markov_order: usize,
    t0: usize,
    t_dyn: usize,
    t_future: usize,
    n: usize,
    envs: usize,
    env_counts: Vec<usize>,
    seed: u64,
    has_truth: bool,
}

fn push_f64s(out: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn dataset_to_bytes(batch: &SequenceBatch) -> Result<Vec<u8>> {
    batch.validate()?;
    let has_truth = batch.has_truth();
    let header = Header {
        magic: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
        version: VERSION,
        k: batch.k,
        markov_order: batch.markov_order,
        t0: batch.t0,
        t_dyn: batch.t_dyn,
        t_future: batch.t_future,
        n: batch.len(),
        envs: batch.envs_total,
        env_counts: batch.env_counts(),
        seed: batch.seed,
        has_truth,
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    push_f64s(&mut out, batch.x.data());
    if has_truth {
        push_f64s(&mut out, batch.z_true.as_ref().unwrap().data());
        push_f64s(&mut out, batch.s_true.as_ref().unwrap().data());
    }
    for &e in &batch.env {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    Ok(out)
}

pub fn dataset_from_bytes(bytes: &[u8], path: &Path) -> Result<SequenceBatch> {
    let bad = |d: String| Error::format(path, d);
    if bytes.len() < 16 || &bytes[..8] != DATASET_MAGIC {
        return Err(bad("not a dataset file (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let start = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let h: Header = serde_json::from_slice(&bytes[16..start]).map_err(|e| bad(format!("header: {e}")))?;
    if h.magic.as_bytes() != DATASET_MAGIC || h.version != VERSION {
        return Err(bad(format!("unsupported header {} v{}", h.magic, h.version)));
    }
    let t = h.t0 + h.t_dyn + h.t_future;
    let blocks = [
        h.n * t * h.k,
        if h.has_truth { h.n * (t + h.markov_order) * h.k } else { 0 },
        if h.has_truth { h.n * t * h.k } else { 0 },
    ];
    let expected = start + 8 * (blocks.iter().sum::<usize>() + h.n);
    if bytes.len() != expected {
        return Err(bad(format!(
            "payload is {} bytes, header implies {}",
            bytes.len() - start,
            expected - start
        )));
    }
    let mut pos = start;
    let mut read = |count: usize| -> Vec<u8> {
        let s = bytes[pos..pos + 8 * count].to_vec();
        pos += 8 * count;
        s
    };
    let floats = |raw: Vec<u8>| -> Vec<f64> {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let tensor = |shape: Vec<usize>, data: Vec<f64>| Tensor::new(shape, data).map_err(|e| bad(e.to_string()));
    let x = tensor(vec![h.n, t, h.k], floats(read(blocks[0])))?;
    let (z_true, s_true) = if h.has_truth {
        let z = tensor(vec![h.n, t + h.markov_order, h.k], floats(read(blocks[1])))?;
        let s = tensor(vec![h.n, t, h.k], floats(read(blocks[2])))?;
        (Some(z), Some(s))
    } else {
        (None, None)
    };
    let env: Vec<usize> = read(h.n)
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let batch = SequenceBatch {
        k: h.k,
        markov_order: h.markov_order,
        t0: h.t0,
        t_dyn: h.t_dyn,
        t_future: h.t_future,
        envs_total: h.envs,
        seed: h.seed,
        x,
        env,
        z_true,
        s_true,
    };
    batch.validate().map_err(|e| bad(e.to_string()))?;
    if batch.env_counts() != h.env_counts {
        return Err(bad("environment table disagrees with the index block".into()));
    }
    Ok(batch)
}

pub fn save_dataset(batch: &SequenceBatch, path: &Path) -> Result<()> {
    let bytes = dataset_to_bytes(batch)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<SequenceBatch> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    dataset_from_bytes(&bytes, path)
}
