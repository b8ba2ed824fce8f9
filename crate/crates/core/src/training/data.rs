//! Byte corpora cut into fixed-length next-byte prediction windows.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MohdError, Result};

/// Inputs and next-byte targets for `batch` windows, flattened row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn windows(&self) -> usize {
        self.inputs.len() / self.seq_len
    }
}

/// Non-overlapping windows: window `i` reads bytes `[i·L, i·L + L]`.
pub fn window_count(len: usize, seq_len: usize) -> usize {
    if seq_len == 0 {
        return 0;
    }
    len.saturating_sub(1) / seq_len
}

fn window(bytes: &[u8], start: usize, seq_len: usize, batch: &mut Batch) {
    let w = &bytes[start..start + seq_len + 1];
    batch.inputs.extend(w[..seq_len].iter().map(|&b| b as usize));
    batch.targets.extend(w[1..].iter().map(|&b| b as usize));
}

/// A corpus split into a training head and a held-out tail.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub train: Vec<u8>,
    pub held_out: Vec<u8>,
}

impl Corpus {
    /// The last `holdout_frac` of the bytes are held out; both parts must fit one window.
    pub fn from_bytes(bytes: Vec<u8>, holdout_frac: f64, seq_len: usize) -> Result<Self> {
        if bytes.len() < 2 * (seq_len + 1) {
            return Err(MohdError::Config(format!(
                "corpus of {} bytes is too short for seq_len {seq_len} (needs {} for training and evaluation)",
                bytes.len(),
                2 * (seq_len + 1)
            )));
        }
        let held = ((bytes.len() as f64 * holdout_frac).round() as usize).clamp(seq_len + 1, bytes.len() - seq_len - 1);
        let mut train = bytes;
        let held_out = train.split_off(train.len() - held);
        Ok(Self { train, held_out })
    }

    pub fn load(path: &Path, holdout_frac: f64, seq_len: usize) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| MohdError::io(path, e))?;
        if bytes.is_empty() {
            return Err(MohdError::Empty("corpus file"));
        }
        Self::from_bytes(bytes, holdout_frac, seq_len)
    }

    /// The first `max_windows` held-out windows in order.
    pub fn eval_batches(&self, seq_len: usize, batch: usize, max_windows: usize) -> Vec<Batch> {
        held_batches(&self.held_out, seq_len, batch, max_windows)
    }
}

/// Consecutive windows of `bytes`, `batch` at a time.
pub fn held_batches(bytes: &[u8], seq_len: usize, batch: usize, max_windows: usize) -> Vec<Batch> {
    let count = window_count(bytes.len(), seq_len).min(max_windows);
    let starts: Vec<usize> = (0..count).map(|i| i * seq_len).collect();
    starts
        .chunks(batch.max(1))
        .map(|chunk| {
            let mut b = Batch {
                inputs: Vec::new(),
                targets: Vec::new(),
                seq_len,
            };
            for &s in chunk {
                window(bytes, s, seq_len, &mut b);
            }
            b
        })
        .collect()
}

/// Position in the shuffled window stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataState {
    pub epoch: u64,
    pub cursor: usize,
}

/// Deterministic shuffled window stream: each epoch visits every window once
/// in an order fixed by `(seed, epoch)`.
#[derive(Debug, Clone)]
pub struct BatchStream {
    bytes: Vec<u8>,
    seq_len: usize,
    seed: u64,
    state: DataState,
    order: Vec<usize>,
}

impl BatchStream {
    pub fn new(bytes: Vec<u8>, seq_len: usize, seed: u64) -> Result<Self> {
        Self::resume(bytes, seq_len, seed, DataState::default())
    }

    pub fn resume(bytes: Vec<u8>, seq_len: usize, seed: u64, state: DataState) -> Result<Self> {
        if seq_len < 1 || window_count(bytes.len(), seq_len) == 0 {
            return Err(MohdError::Config(format!(
                "training text of {} bytes holds no window of seq_len {seq_len} (needs seq_len + 1 bytes)",
                bytes.len()
            )));
        }
        let mut s = Self {
            bytes,
            seq_len,
            seed,
            state,
            order: Vec::new(),
        };
        s.order = s.epoch_order(state.epoch);
        if state.cursor > s.order.len() {
            return Err(MohdError::Checkpoint(format!("data cursor {} beyond {} windows", state.cursor, s.order.len())));
        }
        Ok(s)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..window_count(self.bytes.len(), self.seq_len)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(epoch);
        order.shuffle(&mut rng);
        order
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.order.len()
    }

    pub fn state(&self) -> DataState {
        self.state
    }

    pub fn next_batch(&mut self, batch: usize) -> Batch {
        let mut b = Batch {
            inputs: Vec::with_capacity(batch * self.seq_len),
            targets: Vec::with_capacity(batch * self.seq_len),
            seq_len: self.seq_len,
        };
        for _ in 0..batch {
            if self.state.cursor == self.order.len() {
                self.state.epoch += 1;
                self.state.cursor = 0;
                self.order = self.epoch_order(self.state.epoch);
            }
            let w = self.order[self.state.cursor];
            self.state.cursor += 1;
            window(&self.bytes, w * self.seq_len, self.seq_len, &mut b);
        }
        b
    }
}
