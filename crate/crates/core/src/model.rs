//! Byte-level language model: embedding, a stack of blocks, final norm, output head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::MohdConfig;
use crate::error::{MohdError, Result};
use crate::layers::{Block, BlockRecord, BlockSpec, Bound, ParamId, ParamKind, ParamStore};
use crate::numerics::{Tape, Tensor, Var};
use crate::router::RouteStats;
use crate::sparsity::{activation_flow, ActivationTrace, FlowPoint};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: MohdConfig,
    pub spec: BlockSpec,
    pub store: ParamStore,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub final_norm: ParamId,
    pub head: ParamId,
}

/// Tape handles of one forward pass.
#[derive(Debug)]
pub struct Forward {
    pub bound: Bound,
    pub logits: Var,
    pub record: BlockRecord,
}

/// Objective pieces on the tape: `total = ce + balance`.
#[derive(Debug)]
pub struct LossParts {
    pub forward: Forward,
    pub ce: Var,
    /// Sum of the per-router balance losses; absent for the dense baseline.
    pub balance: Option<Var>,
    pub total: Var,
}

impl Model {
    pub fn new(config: &MohdConfig, seed: u64) -> Result<Self> {
        let spec = BlockSpec::from_config(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = &config.model;
        let d = spec.hidden;
        let mut store = ParamStore::new();
        let embed = store.add("embed", ParamKind::Embedding, Tensor::randn(&[m.vocab, d], m.init_std, &mut rng));
        let blocks = (0..m.depth)
            .map(|l| Block::init(&mut store, &spec, l, m.init_std, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = store.add("final_norm", ParamKind::Norm, Tensor::full(&[d], 1.0));
        let head = store.add("head", ParamKind::Embedding, Tensor::randn(&[d, m.vocab], m.init_std, &mut rng));
        Ok(Self {
            config: config.clone(),
            spec,
            store,
            embed,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn vocab(&self) -> usize {
        self.config.model.vocab
    }

    /// Logits for `ids` arranged as consecutive sequences of `seq_len` tokens.
    pub fn forward(&self, tape: &mut Tape, ids: &[usize], seq_len: usize, mut record: BlockRecord) -> Result<Forward> {
        if ids.is_empty() {
            return Err(MohdError::Empty("token batch"));
        }
        if seq_len == 0 || ids.len() % seq_len != 0 {
            return Err(MohdError::shape("forward", format!("{} tokens not a multiple of seq_len {seq_len}", ids.len())));
        }
        let bound = self.store.bind(tape);
        let mut x = tape.embedding(bound.var(self.embed), ids)?;
        for block in &self.blocks {
            x = block.forward(tape, &bound, &self.spec, x, seq_len, &mut record)?;
        }
        let xn = tape.rmsnorm_rows(x, bound.var(self.final_norm), self.spec.norm_eps)?;
        let logits = tape.matmul(xn, bound.var(self.head))?;
        Ok(Forward { bound, logits, record })
    }

    /// Cross-entropy plus `β`-weighted balance loss over every router.
    pub fn loss(&self, tape: &mut Tape, ids: &[usize], targets: &[usize], seq_len: usize, beta: f64) -> Result<LossParts> {
        let forward = self.forward(tape, ids, seq_len, BlockRecord::default())?;
        let scores: Vec<Var> = forward.record.routes.iter().filter_map(|r| r.scores).collect();
        let (ce, balance, total) = total_loss(tape, forward.logits, targets, &scores, beta)?;
        Ok(LossParts {
            forward,
            ce,
            balance,
            total,
        })
    }

    /// Logits without recording gradients.
    pub fn logits(&self, ids: &[usize], seq_len: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, ids, seq_len, BlockRecord::default())?;
        Ok(tape.value(f.logits).clone().with_requires_grad(false))
    }

    /// Probe activations at every (layer, site).
    pub fn traces(&self, ids: &[usize], seq_len: usize) -> Result<Vec<ActivationTrace>> {
        let mut tape = Tape::new();
        Ok(self.forward(&mut tape, ids, seq_len, BlockRecord::probing())?.record.traces)
    }

    /// Mean magnitude per probe site, block input = 100.
    pub fn activation_flow_trace(&self, ids: &[usize], seq_len: usize) -> Result<Vec<FlowPoint>> {
        activation_flow(&self.traces(ids, seq_len)?)
    }

    /// Router statistics accumulated over one forward pass.
    pub fn route_stats(&self, ids: &[usize], seq_len: usize, stats: &mut RouteStats) -> Result<()> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, ids, seq_len, BlockRecord::default())?;
        for r in &f.record.routes {
            stats.record(r.layer, r.component, &r.decisions);
        }
        Ok(())
    }
}

/// `mean CE(logits, targets) + Σ_r β·L_B(scores_r)`; returns `(ce, balance, total)`.
pub fn total_loss(
    tape: &mut Tape,
    logits: Var,
    targets: &[usize],
    router_scores: &[Var],
    beta: f64,
) -> Result<(Var, Option<Var>, Var)> {
    let ce = tape.cross_entropy(logits, targets)?;
    let mut balance: Option<Var> = None;
    for &s in router_scores {
        let lb = tape.balance_loss(s, beta)?;
        balance = Some(match balance {
            Some(b) => tape.add(b, lb)?,
            None => lb,
        });
    }
    let total = match balance {
        Some(b) => tape.add(ce, b)?,
        None => ce,
    };
    Ok((ce, balance, total))
}
