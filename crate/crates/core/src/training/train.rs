//! The training loop, held-out perplexity and metrics logging.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{MohdError, Result};
use crate::model::Model;
use crate::numerics::Tape;

use super::checkpoint::Checkpoint;
use super::data::{Batch, BatchStream, Corpus};
use super::optim::{lr_at, AdamW};

/// `exp(mean token CE)` over the batches; no gradients are recorded.
pub fn eval_ppl(model: &Model, batches: &[Batch]) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for b in batches {
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &b.inputs, b.seq_len, Default::default())?;
        let ce = tape.cross_entropy(f.logits, &b.targets)?;
        total += tape.scalar(ce) * b.targets.len() as f64;
        tokens += b.targets.len();
    }
    if tokens == 0 {
        return Err(MohdError::Empty("evaluation stream"));
    }
    Ok((total / tokens as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub ce: f64,
    pub balance: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub eval_ppl: Option<f64>,
}

pub const METRICS_HEADER: &str = "step,ce,balance,eval_ppl";

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        let ppl = self.eval_ppl.map(|p| p.to_string()).unwrap_or_default();
        format!("{},{},{},{}", self.step, self.ce, self.balance, ppl)
    }
}

#[derive(Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model,
    pub opt: AdamW,
    pub step: usize,
    stream: BatchStream,
    eval: Vec<Batch>,
    /// Where a diagnostic dump is written if the loss turns non-finite.
    pub dump_path: PathBuf,
}

impl Trainer {
    pub fn new(config: RunConfig, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        let model = Model::new(&config.mohd(), config.train.seed)?;
        let opt = AdamW::new(&model.store, &config.train);
        let stream = BatchStream::new(corpus.train.clone(), config.train.seq_len, config.train.seed)?;
        Self::assemble(config, model, opt, 0, stream, corpus)
    }

    /// Continues from a checkpoint taken on the same corpus.
    pub fn resume(ck: &Checkpoint, corpus: &Corpus) -> Result<Self> {
        let model = ck.model()?;
        let opt = ck.optimizer(&model)?;
        let t = &ck.config.train;
        let stream = BatchStream::resume(corpus.train.clone(), t.seq_len, t.seed, ck.data)?;
        Self::assemble(ck.config.clone(), model, opt, ck.step, stream, corpus)
    }

    fn assemble(config: RunConfig, model: Model, opt: AdamW, step: usize, stream: BatchStream, corpus: &Corpus) -> Result<Self> {
        let t = &config.train;
        let eval = corpus.eval_batches(t.seq_len, t.batch, t.eval_windows);
        if eval.is_empty() {
            return Err(MohdError::Empty("held-out windows"));
        }
        let dump_path = if t.metrics.as_os_str().is_empty() {
            PathBuf::from("mohd-nan-dump.txt")
        } else {
            t.metrics.with_extension("nan-dump.txt")
        };
        Ok(Self {
            config,
            model,
            opt,
            step,
            stream,
            eval,
            dump_path,
        })
    }

    pub fn eval_batches(&self) -> &[Batch] {
        &self.eval
    }

    pub fn eval_ppl(&self) -> Result<f64> {
        eval_ppl(&self.model, &self.eval)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.config, &self.model, &self.opt, self.step, self.stream.state())
    }

    /// Runs one optimizer step on the next batch; metrics report the pre-update loss.
    pub fn step_once(&mut self) -> Result<StepMetrics> {
        let t = self.config.train.clone();
        let batch = self.stream.next_batch(t.batch);
        let step = self.step + 1;
        let mut tape = Tape::new();
        let result = self
            .model
            .loss(&mut tape, &batch.inputs, &batch.targets, t.seq_len, self.config.router.beta)
            .and_then(|parts| {
                let total = tape.scalar(parts.total);
                if !total.is_finite() {
                    return Err(MohdError::NonFinite("total loss"));
                }
                let ce = tape.scalar(parts.ce);
                let balance = parts.balance.map_or(0.0, |b| tape.scalar(b));
                tape.backward(parts.total)?;
                Ok((ce, balance, self.model.store.grads(&tape, &parts.forward.bound)))
            });
        let (ce, balance, mut grads) = match result {
            Ok(v) => v,
            Err(MohdError::NonFinite(what)) => return Err(self.abort(step, &batch, what)),
            Err(e) => return Err(e),
        };
        let grad_norm = AdamW::clip(&mut grads, t.grad_clip);
        if !grad_norm.is_finite() {
            return Err(self.abort(step, &batch, "gradient norm"));
        }
        let lr = lr_at(step, t.steps, t.lr, t.warmup_frac, t.min_lr_frac);
        self.opt.step(&mut self.model.store, &grads, lr)?;
        self.step = step;
        let eval_due = (t.eval_interval > 0 && step % t.eval_interval == 0) || step == t.steps;
        let eval_ppl = if eval_due { Some(self.eval_ppl()?) } else { None };
        Ok(StepMetrics {
            step,
            ce,
            balance,
            lr,
            grad_norm,
            eval_ppl,
        })
    }

    fn abort(&self, step: usize, batch: &Batch, what: &str) -> MohdError {
        let mut text = format!("non-finite {what} at step {step}\nbatch inputs:\n");
        for w in batch.inputs.chunks(batch.seq_len) {
            let line: Vec<String> = w.iter().map(usize::to_string).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
        text.push_str("parameter norms:\n");
        for id in self.model.store.ids() {
            text.push_str(&format!("{} {}\n", self.model.store.name(id), self.model.store.get(id).l2_norm()));
        }
        let written = std::fs::write(&self.dump_path, text).is_ok();
        let reason = if written {
            format!("non-finite {what}; diagnostics written to {}", self.dump_path.display())
        } else {
            format!("non-finite {what}; diagnostics could not be written")
        };
        MohdError::Aborted { step, reason }
    }

    /// Trains up to `config.train.steps`, logging one CSV row per step and
    /// saving checkpoints at the configured interval and at the end.
    pub fn run<W: Write>(&mut self, mut metrics: Option<W>) -> Result<Vec<StepMetrics>> {
        let t = self.config.train.clone();
        let ck_path = (!t.checkpoint.as_os_str().is_empty()).then_some(t.checkpoint.as_path());
        let io = |e| MohdError::io(&t.metrics, e);
        if let Some(w) = metrics.as_mut() {
            if self.step == 0 {
                writeln!(w, "{METRICS_HEADER}").map_err(io)?;
            }
        }
        let mut log = Vec::new();
        while self.step < t.steps {
            let m = self.step_once()?;
            if let Some(w) = metrics.as_mut() {
                writeln!(w, "{}", m.csv_row()).map_err(io)?;
            }
            if let Some(p) = ck_path {
                if t.checkpoint_interval > 0 && m.step % t.checkpoint_interval == 0 && m.step < t.steps {
                    self.checkpoint().save(p)?;
                }
            }
            log.push(m);
        }
        if let Some(w) = metrics.as_mut() {
            w.flush().map_err(io)?;
        }
        if let Some(p) = ck_path {
            self.checkpoint().save(p)?;
        }
        Ok(log)
    }
}

/// Loads the configured corpus and trains from scratch, writing metrics and checkpoints.
pub fn train(config: &RunConfig) -> Result<Vec<StepMetrics>> {
    let t = &config.train;
    let corpus = load_corpus(&t.corpus, config)?;
    let mut trainer = Trainer::new(config.clone(), &corpus)?;
    if t.metrics.as_os_str().is_empty() {
        trainer.run(None::<std::io::Sink>)
    } else {
        let file = create(&t.metrics)?;
        trainer.run(Some(std::io::BufWriter::new(file)))
    }
}

pub fn load_corpus(path: &Path, config: &RunConfig) -> Result<Corpus> {
    if path.as_os_str().is_empty() {
        return Err(MohdError::Config("train.corpus is not set".into()));
    }
    Corpus::load(path, config.train.holdout_frac, config.train.seq_len)
}

pub(crate) fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| MohdError::io(dir, e))?;
    }
    std::fs::File::create(path).map_err(|e| MohdError::io(path, e))
}
