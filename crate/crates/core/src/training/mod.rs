//! Byte-level pretraining: data windows, the optimizer, checkpoints and the loop.

mod checkpoint;
mod data;
mod optim;
mod train;

pub use crate::model::total_loss;
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use data::{held_batches, window_count, Batch, BatchStream, Corpus, DataState};
pub use optim::{lr_at, AdamW};
pub use train::{eval_ppl, load_corpus, train, StepMetrics, Trainer, METRICS_HEADER};

pub(crate) use train::create;
